//! Reverse-process sampling: conditional imputation and unconditional
//! generation.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{apply_mask, ChannelMask, Condition, Dataset, MultiChannelSample};
use crate::error::{Error, Result};
use crate::network::Denoiser;
use crate::schedule::{NoiseSchedule, SigmaMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Reverse steps, strided over `1..=T`.
    pub steps: usize,
    pub sigma_mode: SigmaMode,
    /// Samples drawn per input.
    pub num_samples: usize,
    pub overwrite_observed: bool,
    pub seed: u64,
    /// Chains advanced together in one network call.
    pub batch: usize,
    /// Clamp the implied clean estimate to this range before each step;
    /// `None` uses the raw noise prediction.
    pub clip_x0: Option<(f64, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, sigma_mode: SigmaMode::Beta, num_samples: 4, overwrite_observed: false, seed: 0, batch: 64, clip_x0: Some((0.0, 1.0)) }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::InvalidConfig(format!("sampling steps {} not in 1..={timesteps}", self.steps)));
        }
        if self.num_samples == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("num_samples and batch must be at least 1".into()));
        }
        if let Some((lo, hi)) = self.clip_x0 {
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!("clip range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn randn(rngs: &mut [ChaCha8Rng], per: usize, shape: (usize, usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(rngs.len() * per);
    for r in rngs.iter_mut() {
        v.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
    }
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs independent reverse chains, one per condition. Chain `i` draws all
/// of its noise from its own stream `(seed, ids[i])`, so results do not
/// depend on how chains are grouped into batches.
pub fn reverse_chains(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    conditions: &[&Condition],
    ids: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<f32>>> {
    cfg.validate(schedule.timesteps())?;
    let ncfg = net.config();
    let per = ncfg.channels * ncfg.height * ncfg.width;
    let ts = schedule.strided_timesteps(cfg.steps)?;
    let mut out = Vec::with_capacity(conditions.len());
    for (conds, chunk_ids) in conditions.chunks(cfg.batch).zip(ids.chunks(cfg.batch)) {
        let b = conds.len();
        let shape = (b, ncfg.channels, ncfg.height, ncfg.width);
        let mut rngs: Vec<ChaCha8Rng> = chunk_ids.iter().map(|&i| chain_rng(cfg.seed, i)).collect();
        let ctx = net.contextual_encode(&net.condition_tensor(conds)?)?;
        let mut x = randn(&mut rngs, per, shape, net.dtype())?;
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied().unwrap_or(0);
            let mut eps = net.forward_with_context(&x, &vec![t; b], &ctx)?;
            if let Some((lo, hi)) = cfg.clip_x0 {
                eps = schedule.clip_eps(&x, &eps, t, lo, hi)?;
            }
            let z = randn(&mut rngs, per, shape, net.dtype())?;
            x = schedule.posterior_step_between(&x, &eps, t, t_prev, Some(&z), cfg.sigma_mode)?.detach();
        }
        let flat: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampler output".into()));
        }
        out.extend(flat.chunks_exact(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// `K` imputations for every input, each with its own mask. Returns
/// `out[i][k]`, a flat `C x H x W` sample.
pub fn impute_samples(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    inputs: &[&MultiChannelSample],
    masks: &[ChannelMask],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<Vec<f32>>>> {
    if inputs.len() != masks.len() {
        return Err(Error::LengthMismatch(inputs.len(), masks.len()));
    }
    let k = cfg.num_samples;
    let conds: Vec<Condition> = inputs.iter().zip(masks).map(|(x, m)| apply_mask(x, m)).collect::<Result<_>>()?;
    let refs: Vec<&Condition> = conds.iter().flat_map(|c| std::iter::repeat(c).take(k)).collect();
    let ids: Vec<usize> = (0..refs.len()).collect();
    let flat = reverse_chains(net, schedule, &refs, &ids, cfg)?;
    let pixels = inputs.first().map(|x| x.pixels()).unwrap_or(0);
    let mut out = Vec::with_capacity(inputs.len());
    for (i, chunk) in flat.chunks(k).enumerate() {
        let mut samples = chunk.to_vec();
        if cfg.overwrite_observed {
            for s in samples.iter_mut() {
                for c in masks[i].observed_indices() {
                    s[c * pixels..(c + 1) * pixels].copy_from_slice(inputs[i].channel(c));
                }
            }
        }
        out.push(samples);
    }
    Ok(out)
}

/// Imputes every sample of `x_obs` under one mask using a checkpoint.
/// The data must carry the checkpoint's normalization statistics.
pub fn impute(ck: &Checkpoint, x_obs: &Dataset, mask: &ChannelMask, cfg: &SamplerConfig) -> Result<Vec<Vec<Vec<f32>>>> {
    mask.validate(x_obs.channels())?;
    if let (Some(a), Some(b)) = (x_obs.stats(), ck.header.normalization.as_ref()) {
        if a != b {
            return Err(Error::StatsMismatch);
        }
    } else if x_obs.stats().is_some() != ck.header.normalization.is_some() {
        return Err(Error::StatsMismatch);
    }
    let net = ck.denoiser()?;
    let inputs: Vec<&MultiChannelSample> = x_obs.samples().iter().collect();
    let masks = vec![mask.clone(); inputs.len()];
    impute_samples(&net, &ck.header.schedule, &inputs, &masks, cfg)
}

/// `count` samples from the reverse chain under the reserved all-zero
/// unconditional condition.
pub fn generate_unconditional(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    count: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<f32>>> {
    let n = net.config();
    let cond = Condition::unconditional(n.channels, n.height, n.width);
    let refs = vec![&cond; count];
    let ids: Vec<usize> = (0..count).collect();
    reverse_chains(net, schedule, &refs, &ids, cfg)
}

/// Element-wise mean over `K` samples.
pub fn posterior_mean_estimate(samples: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = samples.first().ok_or_else(|| Error::InvalidConfig("no samples to average".into()))?;
    if samples.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = vec![0f64; first.len()];
    for s in samples {
        if s.len() != acc.len() {
            return Err(Error::LengthMismatch(s.len(), acc.len()));
        }
        for (a, &v) in acc.iter_mut().zip(s) {
            *a += v as f64;
        }
    }
    let k = samples.len() as f64;
    Ok(acc.into_iter().map(|a| (a / k) as f32).collect())
}

/// Where an imputation came from, written next to its output container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub input: String,
    pub masks: Vec<Vec<bool>>,
    pub sampler: SamplerConfig,
    pub samples_per_input: usize,
}
