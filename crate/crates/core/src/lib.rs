//! Conditional diffusion for multi-channel, spatially aligned data.
//!
//! A single denoiser is trained with random channel masking so that it can
//! impute any subset of missing channels from any non-empty observed subset.
//! The crate is organised bottom-up:
//!
//! * [`data`]: panels, samples, masks, normalization, tiling and the `MCT1`
//!   container format.
//! * [`schedule`]: noise schedules, the forward process and the reverse step.
//! * [`network`]: the conditional UNet with hierarchical condition injection
//!   and channel attention.
//! * [`training`]: the random-masking training loop and checkpoints.
//! * [`sampling`]: conditional imputation and unconditional generation.
//! * [`eval`]: correlation metrics, imputation protocols and baselines.
//! * [`synth`]: synthetic datasets with a known channel dependency graph.
//! * [`cli`]: the `paneldiff` command-line entry point.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod sampling;
pub mod schedule;
pub mod stats;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
