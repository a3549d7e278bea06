//! Channel attention modules and the condition injection operator.

use candle_core::Tensor;

use super::layers::{sigmoid, softmax_last, Builder, Conv2d, Init, Linear};
use crate::error::{Error, Result};

/// Squeeze-and-excitation gate: global average pool, bottleneck MLP with ReLU,
/// sigmoid, per-channel rescaling.
#[derive(Debug, Clone)]
pub struct SeGate {
    squeeze: Linear,
    excite: Linear,
    channels: usize,
}

impl SeGate {
    pub fn new(b: &mut Builder, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            squeeze: Linear::new(&mut b.pp("squeeze"), channels, hidden, false)?,
            excite: Linear::new(&mut b.pp("excite"), hidden, channels, false)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-sample channel weights `(B, D)`, each in `(0, 1)`.
    pub fn gates(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d, _, _) = z.dims4()?;
        if d != self.channels {
            return Err(Error::ShapeMismatch(format!("SE gate built for {} channels, got {d}", self.channels)));
        }
        let pooled = z.mean((2, 3))?;
        let hidden = self.squeeze.forward(&pooled)?.relu()?;
        sigmoid(&self.excite.forward(&hidden)?)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (b, d, _, _) = z.dims4()?;
        let w = self.gates(z)?.reshape((b, d, 1, 1))?;
        Ok(z.broadcast_mul(&w)?)
    }
}

/// Self-attention across latent channels. Each channel's flattened spatial map
/// (`N = H * W` values) is projected to `d` dimensions, the `D x D` attention
/// matrix mixes channels, and the result is projected back to `N` and added
/// to the input.
#[derive(Debug, Clone)]
pub struct ChannelSelfAttention {
    query: Tensor,
    key: Tensor,
    value: Tensor,
    out: Tensor,
    pixels: usize,
    dim: usize,
}

impl ChannelSelfAttention {
    pub fn new(b: &mut Builder, level: usize, pixels: usize, dim: usize) -> Result<Self> {
        if b.is_strict() && !b.contains("query") {
            return Err(Error::LevelWeightsMissing(level));
        }
        let proj = Init::FanIn { fan_in: pixels, gain: 1.0 };
        Ok(Self {
            query: b.param("query", &[pixels, dim], proj)?,
            key: b.param("key", &[pixels, dim], proj)?,
            value: b.param("value", &[pixels, dim], proj)?,
            out: b.param("out", &[dim, pixels], Init::FanIn { fan_in: dim, gain: 1.0 })?,
            pixels,
            dim,
        })
    }

    /// Returns the residual output and the row-stochastic `(B, D, D)` attention.
    pub fn forward_with_attention(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, d, h, w) = z.dims4()?;
        if h * w != self.pixels {
            return Err(Error::ShapeMismatch(format!(
                "channel attention built for {} pixels, got {h}x{w}",
                self.pixels
            )));
        }
        let flat = z.reshape((b, d, self.pixels))?;
        let q = flat.broadcast_matmul(&self.query)?;
        let k = flat.broadcast_matmul(&self.key)?;
        let v = flat.broadcast_matmul(&self.value)?;
        let scores = q.matmul(&k.transpose(1, 2)?.contiguous()?)?.affine(1.0 / (self.dim as f64).sqrt(), 0.0)?;
        let attn = softmax_last(&scores)?;
        let mixed = attn.matmul(&v)?.broadcast_matmul(&self.out)?.reshape((b, d, h, w))?;
        Ok(((z + mixed)?, attn))
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(z)?.0)
    }
}

/// Attention over the semantic output channels: `y + Conv1x1(SE(y))`.
#[derive(Debug, Clone)]
pub struct OutputAttention {
    se: SeGate,
    mix: Conv2d,
}

impl OutputAttention {
    pub fn new(b: &mut Builder, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            se: SeGate::new(&mut b.pp("se"), channels, reduction)?,
            mix: Conv2d::new(&mut b.pp("mix"), channels, channels, 1, 1, true)?,
        })
    }

    pub fn se(&self) -> &SeGate {
        &self.se
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        Ok((y + self.mix.forward(&self.se.forward(y)?)?)?)
    }
}

/// How contextual features enter the diffusion branch.
#[derive(Debug, Clone)]
pub enum Injector {
    Add,
    SeGate(SeGate),
}

/// `d_feat + e_feat` (additive) or `d_feat + SE(e_feat)` (gated). Shapes must
/// match exactly, which keeps the condition spatially aligned with the target.
pub fn inject_condition(d_feat: &Tensor, e_feat: &Tensor, injector: &Injector) -> Result<Tensor> {
    if d_feat.dims() != e_feat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "injection site: diffusion features {:?} vs contextual features {:?}",
            d_feat.dims(),
            e_feat.dims()
        )));
    }
    let injected = match injector {
        Injector::Add => e_feat.clone(),
        Injector::SeGate(se) => se.forward(e_feat)?,
    };
    Ok((d_feat + injected)?)
}
