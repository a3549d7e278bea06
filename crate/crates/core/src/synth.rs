//! Synthetic panels with a known inter-channel dependency graph.
//!
//! Each sample draws `latents` smooth Gaussian random fields. Channels are
//! built in order from rules over the latents or over earlier channels, then
//! receive independent Gaussian noise of their own scale.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMask, ChannelPanel, Dataset, MultiChannelSample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// The final value of an earlier channel.
    Copy { of: usize },
    /// Weighted sum of the latent fields.
    Linear { weights: Vec<f64> },
    /// `sigmoid(gain * sum_k w_k z_k)`.
    Sigmoid { weights: Vec<f64>, gain: f64 },
    /// `ch_of * sigmoid(gain * ch_gate)` over two earlier channels.
    ProductSigmoid { of: usize, gate: usize, gain: f64 },
    /// Softmax share of latent `latent` among all members of `group`; the
    /// members sum to one at every pixel.
    ExclusivePartition { group: String, latent: usize },
    NoiseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDef {
    pub name: String,
    #[serde(flatten)]
    pub rule: Rule,
    /// Standard deviation of the additive noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub latents: usize,
    /// Gaussian kernel standard deviation in pixels; 0 gives white latents.
    pub length_scale: f64,
    pub channels: Vec<ChannelDef>,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    #[serde(default = "default_sharpness")]
    pub partition_sharpness: f64,
    /// Canonical imputation targets (single-cell presets mark proteins here).
    #[serde(default)]
    pub targets: Vec<String>,
}

fn default_sharpness() -> f64 {
    2.0
}

impl SynthSpec {
    pub fn panel(&self) -> Result<ChannelPanel> {
        ChannelPanel::new(self.channels.iter().map(|c| c.name.clone())).map_err(|e| Error::BadSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.channels.is_empty() || self.height == 0 || self.width == 0 {
            return bad("need at least one channel and a non-empty grid".into());
        }
        if self.latents == 0 {
            return bad("need at least one latent field".into());
        }
        if !(self.length_scale >= 0.0 && self.length_scale.is_finite()) {
            return bad(format!("length scale {} must be finite and >= 0", self.length_scale));
        }
        self.panel()?;
        for (i, c) in self.channels.iter().enumerate() {
            if !(c.noise >= 0.0 && c.noise.is_finite()) {
                return bad(format!("channel {}: noise must be finite and >= 0", c.name));
            }
            let earlier = |j: usize| -> Result<()> {
                if j >= i {
                    Err(Error::BadSpec(format!("channel {} may only reference earlier channels, got {j}", c.name)))
                } else {
                    Ok(())
                }
            };
            match &c.rule {
                Rule::Copy { of } => earlier(*of)?,
                Rule::ProductSigmoid { of, gate, .. } => {
                    earlier(*of)?;
                    earlier(*gate)?;
                }
                Rule::Linear { weights } | Rule::Sigmoid { weights, .. } => {
                    if weights.len() != self.latents {
                        return bad(format!("channel {}: {} weights for {} latents", c.name, weights.len(), self.latents));
                    }
                }
                Rule::ExclusivePartition { latent, .. } => {
                    if *latent >= self.latents {
                        return bad(format!("channel {}: latent {latent} out of range", c.name));
                    }
                }
                Rule::NoiseOnly => {}
            }
        }
        let panel = self.panel()?;
        for t in &self.targets {
            if panel.index_of(t).is_none() {
                return bad(format!("target {t:?} is not a channel"));
            }
        }
        Ok(())
    }
}

/// Standardized smooth random field (periodic Gaussian blur of white noise).
pub fn gaussian_random_field(rng: &mut impl Rng, height: usize, width: usize, length_scale: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..height * width).map(|_| rng.sample(StandardNormal)).collect();
    if length_scale == 0.0 || height * width == 1 {
        return white;
    }
    let radius = (3.0 * length_scale).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * length_scale * length_scale)).exp()).collect();
    let blur = |src: &[f64], rows: usize, cols: usize, along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if along_rows {
                        ((r as isize + d).rem_euclid(rows as isize) as usize, c)
                    } else {
                        (r, (c as isize + d).rem_euclid(cols as isize) as usize)
                    };
                    acc += w * src[rr * cols + cc];
                }
                out[r * cols + c] = acc;
            }
        }
        out
    };
    let field = blur(&blur(&white, height, width, false), height, width, true);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    field.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    rng.set_stream((lane << 48) | index as u64);
    rng
}

/// Channel values of one sample, before conversion to f32.
fn generate_sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = spec.height * spec.width;
    let latents: Vec<Vec<f64>> =
        (0..spec.latents).map(|_| gaussian_random_field(rng, spec.height, spec.width, spec.length_scale)).collect();
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(spec.channels.len());
    for def in &spec.channels {
        let mut v: Vec<f64> = match &def.rule {
            Rule::Copy { of } => channels[*of].clone(),
            Rule::Linear { weights } => {
                (0..n).map(|p| weights.iter().zip(&latents).map(|(w, z)| w * z[p]).sum()).collect()
            }
            Rule::Sigmoid { weights, gain } => (0..n)
                .map(|p| sigmoid(gain * weights.iter().zip(&latents).map(|(w, z)| w * z[p]).sum::<f64>()))
                .collect(),
            Rule::ProductSigmoid { of, gate, gain } => {
                (0..n).map(|p| channels[*of][p] * sigmoid(gain * channels[*gate][p])).collect()
            }
            Rule::ExclusivePartition { group, latent } => {
                let members: Vec<usize> = spec
                    .channels
                    .iter()
                    .filter_map(|c| match &c.rule {
                        Rule::ExclusivePartition { group: g, latent } if g == group => Some(*latent),
                        _ => None,
                    })
                    .collect();
                let s = spec.partition_sharpness;
                (0..n)
                    .map(|p| {
                        let m = members.iter().map(|&l| s * latents[l][p]).fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = members.iter().map(|&l| (s * latents[l][p] - m).exp()).sum();
                        (s * latents[*latent][p] - m).exp() / denom
                    })
                    .collect()
            }
            Rule::NoiseOnly => vec![0.0; n],
        };
        if def.noise > 0.0 {
            for x in v.iter_mut() {
                *x += def.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        channels.push(v);
    }
    channels
}

fn generate(spec: &SynthSpec, split: Split, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let panel = Arc::new(spec.panel()?);
    let samples = (0..count)
        .map(|i| {
            let mut rng = sample_rng(spec.seed, split, i);
            let data: Vec<f32> = generate_sample(spec, &mut rng).into_iter().flatten().map(|v| v as f32).collect();
            MultiChannelSample::new(panel.clone(), spec.height, spec.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(panel, spec.height, spec.width, split, samples)
}

/// Unnormalized training split of `spec.samples` samples.
pub fn gen_spatial(spec: &SynthSpec) -> Result<Dataset> {
    generate(spec, Split::Train, spec.samples)
}

/// Any split; samples of different splits come from disjoint RNG streams.
pub fn gen_split(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let n = if split == Split::Train { spec.samples } else { spec.test_samples };
    generate(spec, split, n)
}

/// Single-cell data: a 1x1 grid per cell. Returns the dataset and the mask
/// template with the spec's targets missing.
pub fn gen_singlecell(spec: &SynthSpec, split: Split) -> Result<(Dataset, ChannelMask)> {
    if spec.height != 1 || spec.width != 1 {
        return Err(Error::BadSpec(format!("single-cell data needs a 1x1 grid, got {}x{}", spec.height, spec.width)));
    }
    let d = gen_split(spec, split)?;
    let missing = d.panel().indices_of(&spec.targets).map_err(|e| Error::BadSpec(e.to_string()))?;
    Ok((d, ChannelMask::with_missing(spec.channels.len(), &missing)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preset {
    Single { spec: SynthSpec },
    /// Two datasets over overlapping panels sharing one generative process.
    Pair { a: SynthSpec, b: SynthSpec },
}

fn ch(name: &str, rule: Rule, noise: f64) -> ChannelDef {
    ChannelDef { name: name.into(), rule, noise }
}

/// The eight-channel spatial preset.
pub fn spatial_basic(seed: u64) -> SynthSpec {
    let part = |l| Rule::ExclusivePartition { group: "P".into(), latent: l };
    SynthSpec {
        latents: 4,
        length_scale: 2.0,
        channels: vec![
            ch("A", Rule::Linear { weights: vec![1.0, 0.0, 0.0, 0.0] }, 0.1),
            ch("A_COPY", Rule::Copy { of: 0 }, 0.0),
            ch("B", Rule::Linear { weights: vec![0.3, 0.9, 0.3, 0.0] }, 0.1),
            ch("PROD", Rule::ProductSigmoid { of: 0, gate: 2, gain: 3.0 }, 0.05),
            ch("P1", part(1), 0.02),
            ch("P2", part(2), 0.02),
            ch("P3", part(3), 0.02),
            ch("NOISE", Rule::NoiseOnly, 1.0),
        ],
        height: 16,
        width: 16,
        samples: 2000,
        test_samples: 200,
        seed,
        partition_sharpness: 2.0,
        targets: Vec::new(),
    }
}

/// Two datasets sharing S1..S3; each has one extra channel informative
/// about the shared ones.
pub fn spatial_pair(seed: u64) -> (SynthSpec, SynthSpec) {
    let lin = |w: [f64; 3]| Rule::Linear { weights: w.to_vec() };
    let shared = vec![
        ch("S1", lin([1.0, 0.0, 0.0]), 0.1),
        ch("S2", Rule::ProductSigmoid { of: 0, gate: 0, gain: 2.0 }, 0.1),
        ch("S3", lin([0.0, 0.8, 0.6]), 0.1),
    ];
    let mut a_channels = shared.clone();
    a_channels.push(ch("A_X", lin([0.0, 1.0, 0.0]), 0.05));
    let mut b_channels = shared;
    b_channels.push(ch("B_Y", lin([0.0, 0.0, 1.0]), 0.05));
    let base = |channels, seed| SynthSpec {
        latents: 3,
        length_scale: 2.0,
        channels,
        height: 16,
        width: 16,
        samples: 1000,
        test_samples: 150,
        seed,
        partition_sharpness: 2.0,
        targets: Vec::new(),
    };
    (base(a_channels, seed), base(b_channels, seed.wrapping_add(0x5eed)))
}

/// 32 genes linear in 4 latents and 8 proteins as sigmoids of latent
/// combinations; the first four proteins are noise-free.
pub fn singlecell_basic(seed: u64) -> SynthSpec {
    let latents = 4;
    let mut wrng = ChaCha8Rng::seed_from_u64(0x6e6e);
    let mut channels = Vec::new();
    for g in 0..32 {
        let weights: Vec<f64> = (0..latents).map(|_| wrng.sample(StandardNormal)).collect();
        channels.push(ch(&format!("G{g:02}"), Rule::Linear { weights }, 0.2));
    }
    let mut targets = Vec::new();
    for p in 0..8 {
        let mut weights = vec![0.0; latents];
        weights[p % latents] = 1.0;
        weights[(p + 1) % latents] = if p < 4 { 0.5 } else { -0.7 };
        let name = format!("PROT{p}");
        channels.push(ch(&name, Rule::Sigmoid { weights, gain: 1.5 }, if p < 4 { 0.0 } else { 0.05 }));
        targets.push(name);
    }
    SynthSpec {
        latents,
        length_scale: 0.0,
        channels,
        height: 1,
        width: 1,
        samples: 4000,
        test_samples: 500,
        seed,
        partition_sharpness: 2.0,
        targets,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["spatial-basic", "spatial-pair", "singlecell-basic"];

pub fn standard_presets(seed: u64) -> Vec<(&'static str, Preset)> {
    let (a, b) = spatial_pair(seed);
    vec![
        ("spatial-basic", Preset::Single { spec: spatial_basic(seed) }),
        ("spatial-pair", Preset::Pair { a, b }),
        ("singlecell-basic", Preset::Single { spec: singlecell_basic(seed) }),
    ]
}

pub fn preset(name: &str, seed: u64) -> Option<Preset> {
    standard_presets(seed).into_iter().find(|(n, _)| *n == name).map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::pearson;

    fn small(mut s: SynthSpec, n: usize) -> SynthSpec {
        s.samples = n;
        s.test_samples = n;
        s
    }

    #[test]
    fn presets_have_stable_names_and_shapes() {
        let names: Vec<&str> = standard_presets(0).iter().map(|(n, _)| *n).collect();
        assert_eq!(names, PRESET_NAMES);
        assert_eq!(spatial_basic(0).channels.len(), 8);
        let (a, b) = spatial_pair(0);
        let pa = a.panel().unwrap();
        let shared = b.panel().unwrap().names().iter().filter(|n| pa.index_of(n).is_some()).count();
        assert!(shared >= 3);
        let sc = singlecell_basic(0);
        assert_eq!(sc.channels.len(), 40);
        assert_eq!(sc.targets.len(), 8);
        for (_, p) in standard_presets(3) {
            match p {
                Preset::Single { spec } => spec.validate().unwrap(),
                Preset::Pair { a, b } => {
                    a.validate().unwrap();
                    b.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn copy_rule_is_bit_identical() {
        let d = gen_spatial(&small(spatial_basic(1), 5)).unwrap();
        for s in d.samples() {
            assert_eq!(s.channel(0), s.channel(1));
        }
    }

    #[test]
    fn partition_sums_to_one_without_noise() {
        let mut spec = small(spatial_basic(2), 4);
        for c in spec.channels.iter_mut().skip(4).take(3) {
            c.noise = 0.0;
        }
        let d = gen_spatial(&spec).unwrap();
        for s in d.samples() {
            for p in 0..s.pixels() {
                let total: f32 = (4..7).map(|c| s.channel(c)[p]).sum();
                assert!((total - 1.0).abs() < 1e-6, "{total}");
            }
        }
    }

    #[test]
    fn noise_free_linear_rule_has_zero_residual() {
        let spec = SynthSpec {
            latents: 2,
            length_scale: 1.5,
            channels: vec![
                ch("Z0", Rule::Linear { weights: vec![1.0, 0.0] }, 0.0),
                ch("Z1", Rule::Linear { weights: vec![0.0, 1.0] }, 0.0),
                ch("L", Rule::Linear { weights: vec![2.0, -0.5] }, 0.0),
            ],
            height: 8,
            width: 8,
            samples: 3,
            test_samples: 0,
            seed: 4,
            partition_sharpness: 2.0,
            targets: vec![],
        };
        for s in gen_spatial(&spec).unwrap().samples() {
            for p in 0..64 {
                let r = s.channel(2)[p] - (2.0 * s.channel(0)[p] - 0.5 * s.channel(1)[p]);
                assert!(r.abs() < 1e-5);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = small(spatial_basic(7), 3);
        assert_eq!(gen_spatial(&spec).unwrap(), gen_spatial(&spec).unwrap());
        let train = gen_split(&spec, Split::Train).unwrap();
        let test = gen_split(&spec, Split::Test).unwrap();
        assert_ne!(train.samples()[0].data(), test.samples()[0].data());
        assert_eq!(test.split(), Split::Test);
    }

    #[test]
    fn latent_fields_are_spatially_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut lag1, mut lag8) = (0.0, 0.0);
        for _ in 0..20 {
            let f = gaussian_random_field(&mut rng, 32, 32, 2.0);
            for r in 0..32 {
                for c in 0..32 {
                    lag1 += f[r * 32 + c] * f[r * 32 + (c + 1) % 32];
                    lag8 += f[r * 32 + c] * f[r * 32 + (c + 8) % 32];
                }
            }
        }
        assert!(lag1 > lag8, "lag1 {lag1} lag8 {lag8}");
    }

    #[test]
    fn singlecell_noise_free_protein_matches_construction() {
        let spec = SynthSpec {
            latents: 1,
            length_scale: 0.0,
            channels: vec![
                ch("LAT", Rule::Linear { weights: vec![1.0] }, 0.0),
                ch("PROT", Rule::Sigmoid { weights: vec![1.0], gain: 1.0 }, 0.0),
            ],
            height: 1,
            width: 1,
            samples: 200,
            test_samples: 0,
            seed: 1,
            partition_sharpness: 2.0,
            targets: vec!["PROT".into()],
        };
        let (d, mask) = gen_singlecell(&spec, Split::Train).unwrap();
        assert_eq!(mask.missing_indices(), vec![1]);
        assert_eq!((d.len(), d.channels(), d.height(), d.width()), (200, 2, 1, 1));
        let lat: Vec<f64> = d.channel_values(0).iter().map(|&v| sigmoid(v as f64)).collect();
        let prot: Vec<f64> = d.channel_values(1).iter().map(|&v| v as f64).collect();
        assert!((pearson(&lat, &prot).unwrap().r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_forward_references_and_bad_weights() {
        let mut spec = small(spatial_basic(0), 1);
        spec.channels[1].rule = Rule::Copy { of: 5 };
        assert!(matches!(spec.validate(), Err(Error::BadSpec(_))));
        let mut spec = small(spatial_basic(0), 1);
        spec.channels[0].rule = Rule::Linear { weights: vec![1.0] };
        assert!(matches!(gen_spatial(&spec), Err(Error::BadSpec(_))));
        assert!(gen_singlecell(&spatial_basic(0), Split::Train).is_err());
    }
}
