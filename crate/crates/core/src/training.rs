//! Random channel-masking training.
//!
//! Every sample in a batch draws its own observed set, is turned into a
//! zero-filled condition, is diffused to a uniform random timestep and the
//! network is asked for the noise over the full panel.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::data::{apply_mask, ChannelMask, ChannelPanel, Condition, Dataset, MultiChannelSample};
use crate::error::{Error, Result};
use crate::network::{Denoiser, NetworkConfig, ParamStore};
use crate::schedule::NoiseSchedule;

/// Attempts at drawing a non-empty mask before one channel is forced.
pub const MASK_RESAMPLES: usize = 8;

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 1 down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    AllChannels,
    MaskedOnly,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-channels" => Ok(Self::AllChannels),
            "masked-only" => Ok(Self::MaskedOnly),
            o => Err(Error::InvalidConfig(format!("unknown loss mode {o:?} (all-channels|masked-only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_prob: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub deterministic: bool,
    /// Channels that are always missing; empty means random masking.
    pub fixed_targets: Vec<String>,
    /// Decay of the exponential moving average of the weights used for
    /// inference; 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.5,
            batch_size: 16,
            steps: 500,
            lr: 2e-4,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            loss_mode: LossMode::AllChannels,
            checkpoint_every: 0,
            deterministic: true,
            fixed_targets: Vec::new(),
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Learning rate of update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (step.saturating_sub(1)) as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!("mask probability {} not in (0, 1]", self.mask_prob)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("bad optimizer hyperparameters".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("EMA decay {} not in [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

/// Switches `cfg` to single-channel training: `targets` always missing,
/// everything else always observed.
pub fn fixed_channel_mode(cfg: &TrainConfig, targets: &[String], panel: &ChannelPanel) -> Result<TrainConfig> {
    if targets.is_empty() {
        return Err(Error::UnknownChannel("empty target list".into()));
    }
    let idx = panel.indices_of(targets)?;
    let mask = ChannelMask::with_missing(panel.count(), &idx);
    mask.validate(panel.count())?;
    Ok(TrainConfig { fixed_targets: targets.to_vec(), ..cfg.clone() })
}

/// Draws an observed set: each channel independently with probability `p`,
/// redrawn up to [`MASK_RESAMPLES`] times while empty, after which one
/// uniformly chosen channel is observed.
pub fn sample_mask(channels: usize, p: f64, rng: &mut impl Rng) -> ChannelMask {
    sample_mask_present(&vec![true; channels], p, rng)
}

/// Like [`sample_mask`], restricted to the `present` channels; absent
/// channels are never observed.
pub fn sample_mask_present(present: &[bool], p: f64, rng: &mut impl Rng) -> ChannelMask {
    let p = p.clamp(0.0, 1.0);
    for _ in 0..=MASK_RESAMPLES {
        let observed: Vec<bool> = present.iter().map(|&pr| rng.gen_bool(p) && pr).collect();
        if observed.iter().any(|&o| o) {
            return ChannelMask::new(observed);
        }
    }
    let candidates: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    let mut observed = vec![false; present.len()];
    if !candidates.is_empty() {
        observed[candidates[rng.gen_range(0..candidates.len())]] = true;
    }
    ChannelMask::new(observed)
}

/// Training samples plus, for panels merged from several sources, which
/// channels each sample actually measured.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub data: Dataset,
    pub present: Option<Vec<Vec<bool>>>,
}

impl TrainingSet {
    pub fn new(data: Dataset) -> Self {
        Self { data, present: None }
    }

    pub fn with_presence(data: Dataset, present: Vec<Vec<bool>>) -> Result<Self> {
        if present.len() != data.len() || present.iter().any(|p| p.len() != data.channels()) {
            return Err(Error::DimMismatch("presence table does not match the dataset".into()));
        }
        Ok(Self { data, present: Some(present) })
    }

    fn present(&self, i: usize) -> Vec<bool> {
        match &self.present {
            Some(p) => p[i].clone(),
            None => vec![true; self.data.channels()],
        }
    }
}

/// Adam with bias correction and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from `grads`; returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let mut named: Vec<(&String, &Var, Tensor)> = Vec::new();
        let mut sq = 0.0;
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                named.push((name, var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, g) in named {
            let g = g.affine(scale, 0.0)?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            if self.lr != 0.0 {
                let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
                let update = m.affine(self.lr / bc1, 0.0)?.div(&denom)?;
                var.set(&(var.as_tensor() - update)?.detach())?;
            }
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }

    fn save_into(&self, ck: &mut Checkpoint) {
        for (n, t) in &self.m {
            ck.insert(format!("adam.m.{n}"), t.clone());
        }
        for (n, t) in &self.v {
            ck.insert(format!("adam.v.{n}"), t.clone());
        }
    }

    fn load_from(&mut self, ck: &Checkpoint) {
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                self.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                self.v.insert(n.to_string(), t.clone());
            }
        }
    }
}

/// Everything needed to continue a run exactly.
pub struct TrainState {
    pub step: u64,
    pub net: Denoiser,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub losses: Vec<(u64, f64)>,
    /// Averaged weights, when `ema_decay > 0`.
    pub ema: Option<ParamStore>,
}

/// Prefix of the raw training weights in a checkpoint that stores averaged
/// weights as its network parameters.
const RAW_PREFIX: &str = "train.";

#[derive(Serialize, Deserialize)]
struct ResumeBlock {
    config: TrainConfig,
    rng: ChaCha8Rng,
    adam_t: u64,
}

impl TrainState {
    pub fn new(net: Denoiser, cfg: &TrainConfig) -> Result<Self> {
        let ema = if cfg.ema_decay > 0.0 { Some(net.params().deep_clone()?) } else { None };
        Ok(Self { step: 0, net, optimizer: Adam::new(cfg), rng: ChaCha8Rng::seed_from_u64(cfg.seed), losses: Vec::new(), ema })
    }

    /// The network used for sampling: averaged weights if kept, else the
    /// training weights.
    pub fn inference_net(&self) -> Result<Denoiser> {
        match &self.ema {
            Some(ema) => Denoiser::from_store(self.net.config().clone(), ema.deep_clone()?),
            None => Ok(self.net.clone()),
        }
    }

    /// Moves the averaged weights toward the current ones. The decay ramps
    /// up over the first steps so early weights are forgotten quickly.
    fn update_ema(&mut self, decay: f64) -> Result<()> {
        let Some(ema) = &self.ema else { return Ok(()) };
        let n = self.step as f64;
        let d = decay.min((1.0 + n) / (10.0 + n));
        for (name, avg) in ema.iter() {
            let cur = self.net.params().get(name).ok_or_else(|| Error::InvalidConfig(format!("no parameter {name}")))?;
            let next = (avg.as_tensor().affine(d, 0.0)? + cur.as_tensor().affine(1.0 - d, 0.0)?)?;
            avg.set(&next)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(
        &self,
        cfg: &TrainConfig,
        schedule: &NoiseSchedule,
        data: &Dataset,
    ) -> Result<Checkpoint> {
        let resume = ResumeBlock { config: cfg.clone(), rng: self.rng.clone(), adam_t: self.optimizer.t };
        let header = CheckpointHeader {
            network: self.net.config().clone(),
            schedule: schedule.clone(),
            normalization: data.stats().cloned(),
            panel: Some((**data.panel()).clone()),
            seed: cfg.seed,
            step: self.step,
            training: Some(serde_json::to_value(&resume)?),
        };
        let mut ck = match &self.ema {
            Some(ema) => {
                let mut ck = Checkpoint::new(header, ema);
                for (n, v) in self.net.params().iter() {
                    ck.insert(format!("{RAW_PREFIX}{n}"), v.as_tensor().clone());
                }
                ck
            }
            None => Checkpoint::new(header, self.net.params()),
        };
        self.optimizer.save_into(&mut ck);
        Ok(ck)
    }

    /// Restores a run from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let block: ResumeBlock = match &ck.header.training {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::InvalidConfig("checkpoint carries no training state".into())),
        };
        let mut optimizer = Adam::new(cfg);
        optimizer.t = block.adam_t;
        optimizer.load_from(ck);
        let saved = ck.param_store()?;
        let has_raw = ck.tensors.keys().any(|n| n.starts_with(RAW_PREFIX));
        if has_raw != (cfg.ema_decay > 0.0) {
            return Err(Error::InvalidConfig("EMA setting differs from the checkpoint's".into()));
        }
        let (raw, ema) = if has_raw {
            let mut raw = ParamStore::new(saved.dtype());
            for (name, t) in &ck.tensors {
                if let Some(n) = name.strip_prefix(RAW_PREFIX) {
                    raw.insert(n, Var::from_tensor(&t.copy()?)?);
                }
            }
            (raw, Some(saved))
        } else {
            (saved, None)
        };
        let net = Denoiser::from_store(ck.header.network.clone(), raw)?;
        Ok(Self { step: ck.header.step, net, optimizer, rng: block.rng, losses: Vec::new(), ema })
    }
}

/// Inputs of one batch, fully drawn before the forward pass.
pub struct PreparedBatch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub conditions: Vec<Condition>,
    /// `(B, C)` loss weights: 1 for channels that enter the loss.
    pub weights: Vec<Vec<bool>>,
}

/// Draws masks, timesteps and noise for `samples` in order.
pub fn prepare_batch(
    samples: &[(&MultiChannelSample, Vec<bool>)],
    fixed: Option<&ChannelMask>,
    cfg: &TrainConfig,
    timesteps: usize,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let first = samples.first().ok_or_else(|| Error::InvalidConfig("empty batch".into()))?.0;
    let (c, h, w) = first.shape();
    let mut x0 = Vec::with_capacity(samples.len() * c * h * w);
    let mut eps = Vec::with_capacity(x0.capacity());
    let mut ts = Vec::new();
    let mut conditions = Vec::new();
    let mut weights = Vec::new();
    for (s, present) in samples {
        let mask = match fixed {
            Some(m) => ChannelMask::new(m.observed().iter().zip(present).map(|(&o, &p)| o && p).collect()),
            None => sample_mask_present(present, cfg.mask_prob, rng),
        };
        if mask.observed_count() == 0 {
            return Err(Error::EmptyObservedSet);
        }
        conditions.push(apply_mask(s, &mask)?);
        ts.push(rng.gen_range(1..=timesteps));
        x0.extend(s.data().iter().map(|&v| v as f64));
        eps.extend((0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)));
        weights.push(match cfg.loss_mode {
            LossMode::AllChannels => present.clone(),
            LossMode::MaskedOnly => {
                present.iter().zip(mask.observed()).map(|(&p, &o)| p && !o).collect()
            }
        });
    }
    let shape = (samples.len(), c, h, w);
    Ok(PreparedBatch {
        x0: Tensor::from_vec(x0, shape, &Device::Cpu)?.to_dtype(dtype)?,
        eps: Tensor::from_vec(eps, shape, &Device::Cpu)?.to_dtype(dtype)?,
        ts,
        conditions,
        weights,
    })
}

/// Weighted mean squared error between the true and predicted noise.
pub fn batch_loss(net: &Denoiser, schedule: &NoiseSchedule, batch: &PreparedBatch) -> Result<Tensor> {
    let x_t = schedule.forward_sample_batch(&batch.x0, &batch.ts, &batch.eps)?;
    let conds: Vec<&Condition> = batch.conditions.iter().collect();
    let cond = net.condition_tensor(&conds)?;
    let pred = net.forward(&x_t, &batch.ts, &cond)?;
    weighted_mse(&batch.eps, &pred, &batch.weights)
}

/// `sum_w (eps - pred)^2 / (sum_w * H * W)` with one weight per sample and channel.
pub fn weighted_mse(eps: &Tensor, pred: &Tensor, weights: &[Vec<bool>]) -> Result<Tensor> {
    let (b, c, h, w) = pred.dims4()?;
    if eps.dims() != pred.dims() || weights.len() != b || weights.iter().any(|r| r.len() != c) {
        return Err(Error::ShapeMismatch(format!("eps {:?}, prediction {:?}", eps.dims(), pred.dims())));
    }
    let wflat: Vec<f64> = weights.iter().flatten().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let total: f64 = wflat.iter().sum::<f64>() * (h * w) as f64;
    let weight = Tensor::from_vec(wflat, (b, c, 1, 1), &Device::Cpu)?.to_dtype(pred.dtype())?;
    let sq = (eps - pred)?.sqr()?.broadcast_mul(&weight)?.sum_all()?;
    Ok(sq.affine(1.0 / total.max(1.0), 0.0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer update on `batch`; returns the loss before the update.
pub fn training_step(
    set: &TrainingSet,
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    let fixed = fixed_mask(cfg, set.data.panel())?;
    let n = set.data.len();
    if n == 0 {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let picks: Vec<usize> = (0..cfg.batch_size).map(|_| state.rng.gen_range(0..n)).collect();
    let items: Vec<(&MultiChannelSample, Vec<bool>)> =
        picks.iter().map(|&i| (&set.data.samples()[i], set.present(i))).collect();
    let batch = prepare_batch(&items, fixed.as_ref(), cfg, schedule.timesteps(), state.net.dtype(), &mut state.rng)?;
    for c in &batch.conditions {
        assert!(c.mask().observed_count() >= 1);
    }
    let loss = batch_loss(&state.net, schedule, &batch)?;
    let value = scalar(&loss)?;
    state.step += 1;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step, timesteps: batch.ts.clone(), loss: value });
    }
    let grads = loss.backward()?;
    state.optimizer.lr = cfg.lr_at(state.step);
    state.optimizer.step(state.net.params(), &grads)?;
    state.update_ema(cfg.ema_decay)?;
    state.losses.push((state.step, value));
    Ok(value)
}

fn fixed_mask(cfg: &TrainConfig, panel: &ChannelPanel) -> Result<Option<ChannelMask>> {
    if cfg.fixed_targets.is_empty() {
        return Ok(None);
    }
    let idx = panel.indices_of(&cfg.fixed_targets)?;
    let m = ChannelMask::with_missing(panel.count(), &idx);
    m.validate(panel.count())?;
    Ok(Some(m))
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.mck")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:07}.mck"))
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

/// Result of a run: the trained state and, if an output directory was
/// given, the final checkpoint path.
pub struct TrainResult {
    pub state: TrainState,
    pub checkpoint: Option<PathBuf>,
}

/// Runs the loop to `cfg.steps`, starting fresh or from `resume`.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    schedule: &NoiseSchedule,
    out: Option<&TrainOutput>,
    resume: Option<&Checkpoint>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    if net_cfg.channels != set.data.channels() || net_cfg.height != set.data.height() || net_cfg.width != set.data.width() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {}x{}x{}, data is {}x{}x{}",
            net_cfg.channels,
            net_cfg.height,
            net_cfg.width,
            set.data.channels(),
            set.data.height(),
            set.data.width()
        )));
    }
    if net_cfg.timesteps != schedule.timesteps() {
        return Err(Error::InvalidConfig(format!(
            "network timesteps {} differ from schedule's {}",
            net_cfg.timesteps,
            schedule.timesteps()
        )));
    }
    let mut state = match resume {
        Some(ck) => TrainState::from_checkpoint(ck, cfg)?,
        None => TrainState::new(Denoiser::new(net_cfg.clone(), cfg.seed, DType::F32)?, cfg)?,
    };
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::disk(&o.dir, e))?;
            let cfg_path = o.dir.join("train_config.json");
            std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::disk(&cfg_path, e))?;
            Some(open_loss_log(&o.loss_log(), state.step)?)
        }
        None => None,
    };
    while state.step < cfg.steps {
        let loss = training_step(set, &mut state, schedule, cfg)?;
        if let (Some(f), Some(o)) = (log.as_mut(), out) {
            writeln!(f, "{},{}", state.step, loss).map_err(|e| Error::disk(o.loss_log(), e))?;
        }
        if state.step % 50 == 0 {
            log::info!("step {} loss {loss:.5}", state.step);
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                state.to_checkpoint(cfg, schedule, &set.data)?.save(o.step_checkpoint(state.step))?;
            }
        }
    }
    let checkpoint = match out {
        Some(o) => {
            if let Some(f) = log.as_mut() {
                f.flush().map_err(|e| Error::disk(o.loss_log(), e))?;
            }
            let path = o.final_checkpoint();
            state.to_checkpoint(cfg, schedule, &set.data)?.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainResult { state, checkpoint })
}

/// Opens the loss log, keeping only rows up to `keep_through` when resuming.
fn open_loss_log(path: &Path, keep_through: u64) -> Result<std::fs::File> {
    let mut kept = String::from("step,loss\n");
    if keep_through > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= keep_through) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::disk(path, e))?;
    std::fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::disk(path, e))
}

/// Mean loss over `samples` under masks from `mask_for`, without updating.
pub fn evaluate_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    samples: &[MultiChannelSample],
    mut mask_for: impl FnMut(usize, &mut ChaCha8Rng) -> ChannelMask,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig::default();
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mask = mask_for(i, &mut rng);
        let item = [(s, vec![true; s.channels()])];
        let b = prepare_batch(&item, Some(&mask), &cfg, schedule.timesteps(), net.dtype(), &mut rng)?;
        total += scalar(&batch_loss(net, schedule, &b)?)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Analytic-versus-numeric gradient agreement of one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub group: String,
    pub coords: usize,
    /// `|g_a - g_n| / max(|g_a|, |g_n|)` over the probed coordinates (0 if both vanish).
    pub rel_error: f64,
}

/// Compares backpropagated gradients of the training loss with central
/// finite differences on a few coordinates of every parameter tensor.
/// Runs in f64 with randomized weights so that no branch is inert.
pub fn gradient_check(net_cfg: &NetworkConfig, seed: u64, coords_per_group: usize) -> Result<Vec<GradCheck>> {
    let schedule = NoiseSchedule::new(crate::schedule::ScheduleKind::Cosine, net_cfg.timesteps)?;
    let net = Denoiser::new(net_cfg.clone(), seed, DType::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    net.params().jitter(&mut rng, 0.2)?;
    let panel = std::sync::Arc::new(ChannelPanel::new((0..net_cfg.channels).map(|i| format!("c{i}")))?);
    let n = net_cfg.channels * net_cfg.height * net_cfg.width;
    let samples: Vec<MultiChannelSample> = (0..3)
        .map(|_| {
            let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            MultiChannelSample::new(panel.clone(), net_cfg.height, net_cfg.width, v)
        })
        .collect::<Result<_>>()?;
    let items: Vec<(&MultiChannelSample, Vec<bool>)> = samples.iter().map(|s| (s, vec![true; net_cfg.channels])).collect();
    let batch = prepare_batch(&items, None, &TrainConfig::default(), net_cfg.timesteps, DType::F64, &mut rng)?;
    let loss = batch_loss(&net, &schedule, &batch)?;
    let grads = loss.backward()?;
    let h = 1e-6;
    let mut out = Vec::new();
    for (name, var) in net.params().iter() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = net.params().values(name)?;
        let k = coords_per_group.min(base.len());
        let mut picks: Vec<usize> = (0..k).map(|j| j * base.len() / k).collect();
        if base.len() > k {
            picks.push(rng.gen_range(0..base.len()));
        }
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &i in &picks {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            net.params().set_values(name, &probe)?;
            let up = scalar(&batch_loss(&net, &schedule, &batch)?)?;
            probe[i] = base[i] - h;
            net.params().set_values(name, &probe)?;
            let down = scalar(&batch_loss(&net, &schedule, &batch)?)?;
            net.params().set_values(name, &base)?;
            let numeric = (up - down) / (2.0 * h);
            diff = diff.max((analytic[i] - numeric).abs());
            scale = scale.max(analytic[i].abs()).max(numeric.abs());
        }
        let rel_error = if scale < 1e-9 { diff } else { diff / scale };
        out.push(GradCheck { group: name.clone(), coords: picks.len(), rel_error });
    }
    Ok(out)
}
