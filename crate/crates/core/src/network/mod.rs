//! The conditional denoiser.
//!
//! Two encoders run in parallel over the same grid: the diffusion encoder
//! sees the noisy target `x_t`, the contextual encoder sees the zero-filled
//! condition. After every diffusion-encoder level (and after the bottleneck)
//! the matching contextual feature map is added back, optionally through an
//! SE gate. A standard skip-connected decoder produces a full-panel noise
//! estimate, optionally refined by attention over the output channels.

mod attention;
mod im2col;
mod layers;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{inject_condition, ChannelSelfAttention, Injector, OutputAttention, SeGate};
pub use layers::{Builder, Init};
pub use layers::{sigmoid, softmax_last, timestep_embedding, Conv2d, GroupNorm, Linear, ParamStore};

use crate::data::Condition;
use crate::error::{Error, Result};

/// Latent channel attention used inside UNet blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnetAttention {
    None,
    Se,
    /// SE gating everywhere plus full channel self-attention at the
    /// configured placement.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPlacement {
    AllLevels,
    BottleneckOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    Add,
    SeGate,
}

impl std::str::FromStr for UnetAttention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "se" => Ok(Self::Se),
            "full" => Ok(Self::Full),
            o => Err(Error::InvalidConfig(format!("unknown unet attention {o:?} (none|se|full)"))),
        }
    }
}

impl std::str::FromStr for AttentionPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-levels" => Ok(Self::AllLevels),
            "bottleneck-only" => Ok(Self::BottleneckOnly),
            o => Err(Error::InvalidConfig(format!("unknown placement {o:?} (all-levels|bottleneck-only)"))),
        }
    }
}

impl std::str::FromStr for InjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "se-gate" | "se_gate" => Ok(Self::SeGate),
            o => Err(Error::InvalidConfig(format!("unknown injection {o:?} (add|se-gate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Panel size `C`.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Largest timestep the network is asked about (the schedule's `T`).
    pub timesteps: usize,
    pub levels: usize,
    pub base_width: usize,
    pub width_mults: Vec<usize>,
    pub unet_attention: UnetAttention,
    pub attention_placement: AttentionPlacement,
    pub output_attention: bool,
    pub injection: InjectionMode,
    /// When false the contextual branch is not built and conditions are ignored.
    pub conditional: bool,
    /// Append one binary observed-indicator plane per channel to the condition.
    pub mask_indicators: bool,
    pub se_reduction: usize,
    pub attention_dim: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            height: 16,
            width: 16,
            timesteps: 400,
            levels: 2,
            base_width: 16,
            width_mults: vec![1, 2],
            unet_attention: UnetAttention::Full,
            attention_placement: AttentionPlacement::BottleneckOnly,
            output_attention: true,
            injection: InjectionMode::SeGate,
            conditional: true,
            mask_indicators: false,
            se_reduction: 4,
            attention_dim: 16,
            time_dim: 32,
            norm_groups: 4,
        }
    }
}

impl NetworkConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.width_mults.iter().map(|m| m * self.base_width).collect()
    }

    /// Spatial size of each level; every level halves (a size of 1 stays 1).
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.height, self.width)];
        for _ in 1..self.levels {
            let (h, w) = *sizes.last().unwrap();
            sizes.push((h.div_ceil(2), w.div_ceil(2)));
        }
        sizes
    }

    fn full_at_level(&self, level: usize, bottleneck: bool) -> bool {
        self.unet_attention == UnetAttention::Full
            && (bottleneck || self.attention_placement == AttentionPlacement::AllLevels)
            && level < self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.levels < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels));
        }
        if self.width_mults.len() != self.levels {
            return bad(format!("{} width multipliers for {} levels", self.width_mults.len(), self.levels));
        }
        if self.base_width < 8 {
            return bad(format!("base width {} < 8", self.base_width));
        }
        if self.timesteps < 2 {
            return bad("timesteps must be at least 2".into());
        }
        if self.se_reduction == 0 || self.norm_groups == 0 {
            return bad("se_reduction and norm_groups must be positive".into());
        }
        for w in self.widths() {
            if w == 0 || w % self.se_reduction != 0 {
                return bad(format!("width {w} is not a multiple of the SE reduction {}", self.se_reduction));
            }
            if w % self.norm_groups != 0 {
                return bad(format!("width {w} is not a multiple of {} norm groups", self.norm_groups));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even and >= 2", self.time_dim));
        }
        let sizes = self.level_sizes();
        for (l, &(h, w)) in sizes.iter().enumerate().take(self.levels - 1) {
            for s in [h, w] {
                if s != 1 && s % 2 != 0 {
                    return bad(format!("level {l} size {h}x{w} cannot be halved exactly"));
                }
            }
        }
        for (l, &(h, w)) in sizes.iter().enumerate() {
            let bottleneck = l == self.levels - 1;
            if self.full_at_level(l, bottleneck) && (self.attention_dim == 0 || self.attention_dim > h * w) {
                return bad(format!(
                    "attention dim {} must be in 1..={} at level {l}",
                    self.attention_dim,
                    h * w
                ));
            }
        }
        Ok(())
    }
}

/// Channel attention inside a block.
#[derive(Debug, Clone)]
enum BlockAttention {
    None,
    Se(SeGate),
    Full(SeGate, ChannelSelfAttention),
}

impl BlockAttention {
    fn new(b: &mut Builder, cfg: &NetworkConfig, channels: usize, level: usize, bottleneck: bool) -> Result<Self> {
        let (h, w) = cfg.level_sizes()[level];
        Ok(match cfg.unet_attention {
            UnetAttention::None => Self::None,
            UnetAttention::Se => Self::Se(SeGate::new(&mut b.pp("se"), channels, cfg.se_reduction)?),
            UnetAttention::Full => {
                let se = SeGate::new(&mut b.pp("se"), channels, cfg.se_reduction)?;
                if cfg.full_at_level(level, bottleneck) {
                    Self::Full(se, ChannelSelfAttention::new(&mut b.pp("attn"), level, h * w, cfg.attention_dim)?)
                } else {
                    Self::Se(se)
                }
            }
        })
    }

    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        match self {
            Self::None => Ok(h.clone()),
            Self::Se(se) => se.forward(h),
            Self::Full(se, attn) => attn.forward(&se.forward(h)?),
        }
    }
}

/// Residual block with group normalization, SiLU, timestep scale-and-shift
/// modulation and channel attention after the second convolution.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    attention: BlockAttention,
    skip: Option<Conv2d>,
    out_channels: usize,
}

impl ResBlock {
    fn new(
        b: &mut Builder,
        cfg: &NetworkConfig,
        input: usize,
        output: usize,
        level: usize,
        bottleneck: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), input, cfg.norm_groups)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), input, output, 3, 1, false)?,
            time: Linear::new(&mut b.pp("time"), cfg.time_dim, 2 * output, false)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), output, cfg.norm_groups)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), output, output, 3, 1, false)?,
            attention: BlockAttention::new(b, cfg, output, level, bottleneck)?,
            skip: if input != output { Some(Conv2d::new(&mut b.pp("skip"), input, output, 1, 1, false)?) } else { None },
            out_channels: output,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.norm2.forward(&h)?;
        let mod_ = self.time.forward(temb)?;
        let b = mod_.dim(0)?;
        let scale = mod_.narrow(1, 0, self.out_channels)?.reshape((b, self.out_channels, 1, 1))?;
        let shift = mod_.narrow(1, self.out_channels, self.out_channels)?.reshape((b, self.out_channels, 1, 1))?;
        let h = h.broadcast_mul(&scale.affine(1.0, 1.0)?)?.broadcast_add(&shift)?;
        let h = self.attention.forward(&self.conv2.forward(&h.silu()?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Residual block of the contextual encoder. It has no normalization and no
/// pooling, so every output pixel depends only on a local window of the
/// condition.
#[derive(Debug, Clone)]
struct ContextBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ContextBlock {
    fn new(b: &mut Builder, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.pp("conv1"), input, output, 3, 1, false)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), output, output, 3, 1, false)?,
            skip: if input != output { Some(Conv2d::new(&mut b.pp("skip"), input, output, 1, 1, false)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct ContextEncoder {
    stem: Conv2d,
    blocks: Vec<ContextBlock>,
    downs: Vec<Conv2d>,
}

impl ContextEncoder {
    fn new(b: &mut Builder, cfg: &NetworkConfig) -> Result<Self> {
        let widths = cfg.widths();
        let input = if cfg.mask_indicators { 2 * cfg.channels } else { cfg.channels };
        let stem = Conv2d::new(&mut b.pp("stem"), input, widths[0], 3, 1, false)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            blocks.push(ContextBlock::new(&mut b.pp(format!("block{l}")), prev, w)?);
            if l + 1 < cfg.levels {
                downs.push(Conv2d::new(&mut b.pp(format!("down{l}")), w, w, 3, 2, false)?);
            }
            prev = w;
        }
        Ok(Self { stem, blocks, downs })
    }

    fn forward(&self, c: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(c)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            feats.push(h.clone());
            if let Some(d) = self.downs.get(l) {
                h = d.forward(&h)?;
            }
        }
        Ok(feats)
    }
}

/// Contextual features of a batch of conditions, one tensor per level.
#[derive(Debug, Clone)]
pub struct ContextFeatures(pub Vec<Tensor>);

/// The full noise predictor `eps_theta(x_t, t, c)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: NetworkConfig,
    store: ParamStore,
    time_in: Linear,
    time_out: Linear,
    stem: Conv2d,
    enc: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_proj: Conv2d,
    out_attention: Option<OutputAttention>,
    context: Option<ContextEncoder>,
    injectors: Vec<Injector>,
}

impl Denoiser {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modules = {
            let mut b = Builder::creating(&mut store, &mut rng);
            Modules::build(&mut b, &cfg)?
        };
        Ok(Self::assemble(cfg, store, modules))
    }

    /// Wraps existing parameters (e.g. from a checkpoint); every parameter the
    /// configuration needs must be present.
    pub fn from_store(cfg: NetworkConfig, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let modules = {
            let mut b = Builder::strict(&mut store);
            Modules::build(&mut b, &cfg)?
        };
        Ok(Self::assemble(cfg, store, modules))
    }

    fn assemble(cfg: NetworkConfig, store: ParamStore, m: Modules) -> Self {
        Self {
            cfg,
            store,
            time_in: m.time_in,
            time_out: m.time_out,
            stem: m.stem,
            enc: m.enc,
            downs: m.downs,
            mid: m.mid,
            dec: m.dec,
            ups: m.ups,
            out_norm: m.out_norm,
            out_proj: m.out_proj,
            out_attention: m.out_attention,
            context: m.context,
            injectors: m.injectors,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Condition planes of a batch as a `(B, C_in, H, W)` tensor.
    pub fn condition_tensor(&self, conds: &[&Condition]) -> Result<Tensor> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut flat = Vec::new();
        for c in conds {
            if c.shape() != (self.cfg.channels, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "condition {:?} vs network {:?}",
                    c.shape(),
                    (self.cfg.channels, h, w)
                )));
            }
            flat.extend(c.input_planes(self.cfg.mask_indicators));
        }
        let cin = if self.cfg.mask_indicators { 2 * self.cfg.channels } else { self.cfg.channels };
        Ok(Tensor::from_vec(flat, (conds.len(), cin, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Contextual features for a `(B, C_in, H, W)` condition tensor.
    pub fn contextual_encode(&self, cond: &Tensor) -> Result<ContextFeatures> {
        let (_, cin, h, w) = cond.dims4()?;
        let expected = if self.cfg.mask_indicators { 2 * self.cfg.channels } else { self.cfg.channels };
        if cin != expected || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::ShapeMismatch(format!(
                "condition {:?} vs expected (_, {expected}, {}, {})",
                cond.dims(),
                self.cfg.height,
                self.cfg.width
            )));
        }
        match &self.context {
            Some(ctx) => Ok(ContextFeatures(ctx.forward(cond)?)),
            None => Ok(ContextFeatures(Vec::new())),
        }
    }

    /// Batched noise prediction: `x_t` is `(B, C, H, W)`, one timestep per item.
    pub fn forward(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let ctx = self.contextual_encode(cond)?;
        self.forward_with_context(x_t, ts, &ctx)
    }

    /// Like [`Denoiser::forward`] with precomputed contextual features, which
    /// stay fixed along a reverse chain.
    pub fn forward_with_context(&self, x_t: &Tensor, ts: &[usize], ctx: &ContextFeatures) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, c, h, w) = x_t.dims4()?;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::ShapeMismatch(format!(
                "x_t {:?} vs network (_, {}, {}, {})",
                x_t.dims(),
                cfg.channels,
                cfg.height,
                cfg.width
            )));
        }
        if ts.len() != b {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {b}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t < 1 || t > cfg.timesteps) {
            return Err(Error::TimestepOutOfRange { t, lo: 1, hi: cfg.timesteps });
        }
        let temb = timestep_embedding(ts, cfg.time_dim, self.dtype())?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?.silu()?;

        let mut h = self.stem.forward(x_t)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            h = self.enc[l].forward(&h, &temb)?;
            if let Some(e) = ctx.0.get(l) {
                h = inject_condition(&h, e, &self.injectors[l])?;
            }
            skips.push(h.clone());
            if let Some(d) = self.downs.get(l) {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        if let Some(e) = ctx.0.last() {
            h = inject_condition(&h, e, &self.injectors[cfg.levels])?;
        }
        let sizes = cfg.level_sizes();
        for l in (0..cfg.levels).rev() {
            h = Tensor::cat(&[&h, &skips[l]], 1)?;
            h = self.dec[l].forward(&h, &temb)?;
            if l > 0 {
                let (uh, uw) = sizes[l - 1];
                h = self.ups[l - 1].forward(&h.upsample_nearest2d(uh, uw)?)?;
            }
        }
        let y = self.out_proj.forward(&self.out_norm.forward(&h)?.silu()?)?;
        match &self.out_attention {
            Some(oa) => oa.forward(&y),
            None => Ok(y),
        }
    }

    /// Single-sample prediction `eps_theta(x_t, t, c)` over all `C` channels.
    pub fn denoise(&self, x_t: &[f32], t: usize, c: &Condition) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let shape = (1, cfg.channels, cfg.height, cfg.width);
        if x_t.len() != cfg.channels * cfg.height * cfg.width {
            return Err(Error::ShapeMismatch(format!("x_t has {} values, expected {shape:?}", x_t.len())));
        }
        let x = Tensor::from_slice(x_t, shape, &Device::Cpu)?.to_dtype(self.dtype())?;
        let cond = self.condition_tensor(&[c])?;
        let eps = self.forward(&x, &[t], &cond)?;
        Ok(eps.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }
}

struct Modules {
    time_in: Linear,
    time_out: Linear,
    stem: Conv2d,
    enc: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_proj: Conv2d,
    out_attention: Option<OutputAttention>,
    context: Option<ContextEncoder>,
    injectors: Vec<Injector>,
}

impl Modules {
    fn build(b: &mut Builder, cfg: &NetworkConfig) -> Result<Self> {
        let widths = cfg.widths();
        let last = cfg.levels - 1;
        let time_in = Linear::new(&mut b.pp("time.in"), cfg.time_dim, cfg.time_dim, false)?;
        let time_out = Linear::new(&mut b.pp("time.out"), cfg.time_dim, cfg.time_dim, false)?;
        let stem = Conv2d::new(&mut b.pp("stem"), cfg.channels, widths[0], 3, 1, false)?;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            enc.push(ResBlock::new(&mut b.pp(format!("enc{l}")), cfg, prev, w, l, false)?);
            if l < last {
                downs.push(Conv2d::new(&mut b.pp(format!("down{l}")), w, w, 3, 2, false)?);
            }
            prev = w;
        }
        let mid = ResBlock::new(&mut b.pp("mid"), cfg, widths[last], widths[last], last, true)?;
        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for (l, &w) in widths.iter().enumerate() {
            dec.push(ResBlock::new(&mut b.pp(format!("dec{l}")), cfg, 2 * w, w, l, false)?);
            if l > 0 {
                ups.push(Conv2d::new(&mut b.pp(format!("up{l}")), w, widths[l - 1], 3, 1, false)?);
            }
        }
        let out_norm = GroupNorm::new(&mut b.pp("out.norm"), widths[0], cfg.norm_groups)?;
        let out_proj = Conv2d::new(&mut b.pp("out.proj"), widths[0], cfg.channels, 3, 1, true)?;
        let out_attention = if cfg.output_attention {
            Some(OutputAttention::new(&mut b.pp("out.attention"), cfg.channels, cfg.se_reduction)?)
        } else {
            None
        };
        let (context, injectors) = if cfg.conditional {
            let ctx = ContextEncoder::new(&mut b.pp("context"), cfg)?;
            let mut inj = Vec::new();
            for l in 0..=cfg.levels {
                let w = widths[l.min(last)];
                inj.push(match cfg.injection {
                    InjectionMode::Add => Injector::Add,
                    InjectionMode::SeGate => {
                        Injector::SeGate(SeGate::new(&mut b.pp(format!("inject{l}")), w, cfg.se_reduction)?)
                    }
                });
            }
            (Some(ctx), inj)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            time_in,
            time_out,
            stem,
            enc,
            downs,
            mid,
            dec,
            ups,
            out_norm,
            out_proj,
            out_attention,
            context,
            injectors,
        })
    }
}

/// Number of scalar parameters the configuration instantiates.
pub fn count_params(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Denoiser::new(cfg.clone(), 0, DType::F32)?.num_params())
}

#[cfg(test)]
mod tests;
