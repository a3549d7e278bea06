//! Correlation metrics, imputation protocols, analytic baselines, the
//! union-versus-intersection experiment and the ablation driver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::json_digest;
use crate::data::{apply_stats, normalize_per_channel, ChannelMask, ChannelPanel, Dataset, MultiChannelSample};
use crate::error::{Error, Result};
use crate::network::{Denoiser, InjectionMode, NetworkConfig, UnetAttention};
use crate::sampling::{impute_samples, posterior_mean_estimate, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::stats::{mean, sum, CompensatedSum};
use crate::training::{sample_mask, train, TrainConfig, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Either input was constant; `r` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation with compensated sums.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::TooShort(a.len()));
    }
    let n = a.len() as f64;
    let ma = sum(a.iter().copied()) / n;
    let mb = sum(b.iter().copied()) / n;
    let (mut sab, mut saa, mut sbb) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab.add(dx * dy);
        saa.add(dx * dx);
        sbb.add(dy * dy);
    }
    let (saa, sbb) = (saa.value(), sbb.value());
    // Relative threshold: a vector whose spread is rounding noise is constant.
    let tiny = |s: f64, m: f64| s <= 1e-24 * n * (1.0 + m * m);
    if tiny(saa, ma) || tiny(sbb, mb) {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    let r = (sab.value() / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, degenerate: false })
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Mean of the non-degenerate values (0 if there are none).
fn mean_valid(rs: &[Correlation]) -> f64 {
    let v: Vec<f64> = rs.iter().filter(|c| !c.degenerate).map(|c| c.r).collect();
    mean(&v).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: String,
    pub index: usize,
    pub r: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_channel: Vec<ChannelScore>,
    /// Mean over target channels of the pooled per-channel r.
    pub r_p: f64,
    /// Mean over samples of the per-sample r across target channels and pixels.
    pub r_c: f64,
    /// Degenerate channels, excluded from `r_p`.
    pub excluded: Vec<String>,
}

/// Scores the channels `mask` marks missing.
pub fn score_channels(pred: &Dataset, truth: &Dataset, mask: &ChannelMask) -> Result<Scores> {
    if pred.panel() != truth.panel() {
        return Err(Error::PanelMismatch("prediction and truth panels differ".into()));
    }
    if pred.len() != truth.len() || pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::PanelMismatch("prediction and truth shapes differ".into()));
    }
    if mask.len() != truth.channels() {
        return Err(Error::DimMismatch(format!("mask of {} for {} channels", mask.len(), truth.channels())));
    }
    let targets = mask.missing_indices();
    let preds: Vec<&[f32]> = pred.samples().iter().map(|s| s.data()).collect();
    let truths: Vec<&[f32]> = truth.samples().iter().map(|s| s.data()).collect();
    score_flat(&preds, &truths, truth.panel(), truth.height() * truth.width(), &targets)
}

fn score_flat(
    preds: &[&[f32]],
    truths: &[&[f32]],
    panel: &ChannelPanel,
    pixels: usize,
    targets: &[usize],
) -> Result<Scores> {
    let mut per_channel = Vec::new();
    let mut rs = Vec::new();
    for &c in targets {
        let p: Vec<f64> = preds.iter().flat_map(|s| to_f64(&s[c * pixels..(c + 1) * pixels])).collect();
        let t: Vec<f64> = truths.iter().flat_map(|s| to_f64(&s[c * pixels..(c + 1) * pixels])).collect();
        let r = pearson(&p, &t)?;
        rs.push(r);
        per_channel.push(ChannelScore { channel: panel.names()[c].clone(), index: c, r: r.r, degenerate: r.degenerate });
    }
    let mut per_sample = Vec::new();
    if targets.len() * pixels >= 2 {
        for (p, t) in preds.iter().zip(truths) {
            let pv: Vec<f64> = targets.iter().flat_map(|&c| to_f64(&p[c * pixels..(c + 1) * pixels])).collect();
            let tv: Vec<f64> = targets.iter().flat_map(|&c| to_f64(&t[c * pixels..(c + 1) * pixels])).collect();
            per_sample.push(pearson(&pv, &tv)?);
        }
    }
    Ok(Scores {
        r_p: mean_valid(&rs),
        r_c: mean_valid(&per_sample),
        excluded: per_channel.iter().filter(|s| s.degenerate).map(|s| s.channel.clone()).collect(),
        per_channel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub channel: String,
    pub r: f64,
    pub degenerate: bool,
    /// Trial index for random-mask protocols.
    pub trial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub rows: Vec<ReportRow>,
    pub mean_r_p: f64,
    pub mean_r_c: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Every mask used, in order.
    pub masks: Vec<Vec<bool>>,
    pub sampler: SamplerConfig,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,r,degenerate\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.channel, r.r, r.degenerate));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn r_of(&self, channel: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.channel == channel).map(|r| r.r)
    }
}

/// Posterior-mean predictions for `inputs` under per-input masks.
pub fn predict(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    inputs: &[&MultiChannelSample],
    masks: &[ChannelMask],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<f32>>> {
    impute_samples(net, schedule, inputs, masks, cfg)?.iter().map(|k| posterior_mean_estimate(k)).collect()
}

fn report_hash(net: &Denoiser, cfg: &SamplerConfig, protocol: &str) -> Result<String> {
    json_digest(&(net.config(), cfg, protocol))
}

/// Hides one channel at a time (every other present channel observed) and
/// scores it. `targets` defaults to every channel; `present` marks the
/// channels the data actually has (default all).
pub fn eval_single_channel(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    test: &Dataset,
    cfg: &SamplerConfig,
    targets: Option<&[usize]>,
    present: Option<&[bool]>,
) -> Result<EvalReport> {
    let c = test.channels();
    let all: Vec<usize> = (0..c).collect();
    let targets = targets.unwrap_or(&all);
    let present = present.map(|p| p.to_vec()).unwrap_or_else(|| vec![true; c]);
    if targets.is_empty() || test.is_empty() {
        return Err(Error::EmptyProtocol("no target channel or no test sample".into()));
    }
    let inputs: Vec<&MultiChannelSample> = test.samples().iter().collect();
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    let mut rcs = Vec::new();
    for &i in targets {
        let mut observed = present.clone();
        observed[i] = false;
        let mask = ChannelMask::new(observed);
        let preds = predict(net, schedule, &inputs, &vec![mask.clone(); inputs.len()], cfg)?;
        let prefs: Vec<&[f32]> = preds.iter().map(|p| p.as_slice()).collect();
        let trefs: Vec<&[f32]> = inputs.iter().map(|s| s.data()).collect();
        let s = score_flat(&prefs, &trefs, test.panel(), test.height() * test.width(), &[i])?;
        let cs = &s.per_channel[0];
        rows.push(ReportRow { channel: cs.channel.clone(), r: cs.r, degenerate: cs.degenerate, trial: None });
        rcs.push(Correlation { r: s.r_c, degenerate: false });
        masks.push(mask.observed().to_vec());
    }
    let rs: Vec<Correlation> = rows.iter().map(|r| Correlation { r: r.r, degenerate: r.degenerate }).collect();
    Ok(EvalReport {
        protocol: "single-channel".into(),
        mean_r_p: mean_valid(&rs),
        mean_r_c: mean_valid(&rcs),
        rows,
        num_samples: test.len(),
        seed: cfg.seed,
        config_hash: report_hash(net, cfg, "single-channel")?,
        masks,
        sampler: cfg.clone(),
        notes: vec!["r pooled over pixels and samples; point estimate is the mean over K samples".into()],
    })
}

/// Draws a random mask per trial (conditioned on at least one missing
/// channel), imputes every test sample and scores the missing channels.
pub fn eval_random_mask(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    test: &Dataset,
    p: f64,
    trials: usize,
    cfg: &SamplerConfig,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::EmptyProtocol("zero trials".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyProtocol("no test sample".into()));
    }
    let c = test.channels();
    if c < 2 {
        return Err(Error::EmptyProtocol("a single-channel panel has nothing to impute".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let inputs: Vec<&MultiChannelSample> = test.samples().iter().collect();
    let trefs: Vec<&[f32]> = inputs.iter().map(|s| s.data()).collect();
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    let mut rps = Vec::new();
    let mut rcs = Vec::new();
    for trial in 0..trials {
        let mut mask = sample_mask(c, p, &mut rng);
        let mut attempts = 0;
        while mask.missing_count() == 0 && attempts < 1000 {
            mask = sample_mask(c, p, &mut rng);
            attempts += 1;
        }
        if mask.missing_count() == 0 {
            let mut observed = vec![true; c];
            observed[rand::Rng::gen_range(&mut rng, 0..c)] = false;
            mask = ChannelMask::new(observed);
        }
        let trial_cfg = SamplerConfig { seed: cfg.seed.wrapping_add(trial as u64), ..cfg.clone() };
        let preds = predict(net, schedule, &inputs, &vec![mask.clone(); inputs.len()], &trial_cfg)?;
        let prefs: Vec<&[f32]> = preds.iter().map(|p| p.as_slice()).collect();
        let s = score_flat(&prefs, &trefs, test.panel(), test.height() * test.width(), &mask.missing_indices())?;
        for cs in &s.per_channel {
            rows.push(ReportRow { channel: cs.channel.clone(), r: cs.r, degenerate: cs.degenerate, trial: Some(trial) });
        }
        rps.push(Correlation { r: s.r_p, degenerate: s.per_channel.iter().all(|c| c.degenerate) });
        rcs.push(Correlation { r: s.r_c, degenerate: false });
        masks.push(mask.observed().to_vec());
    }
    Ok(EvalReport {
        protocol: format!("random-mask@p={p}"),
        mean_r_p: mean_valid(&rps),
        mean_r_c: mean_valid(&rcs),
        rows,
        num_samples: test.len(),
        seed: cfg.seed,
        config_hash: report_hash(net, cfg, "random-mask")?,
        masks,
        sampler: cfg.clone(),
        notes: vec!["masks with no missing channel are redrawn".into()],
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = sum(v.iter().copied()) / n;
    let var = sum(v.iter().map(|x| (x - m) * (x - m))) / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    pub target: String,
    /// Channel the prediction was built from, for single-channel baselines.
    pub source: Option<String>,
    pub r: f64,
    pub degenerate: bool,
}

/// Predicts channel `target` from the single most correlated other channel
/// on the training data. The spatial variant ranks channels by their mean
/// per-sample (per-tile) correlation instead of the pooled one.
pub fn baseline_most_correlated(train: &Dataset, test: &Dataset, target: &str, spatial: bool) -> Result<BaselineResult> {
    let i = train.panel().index_of(target).ok_or_else(|| Error::UnknownChannel(target.into()))?;
    if test.panel() != train.panel() {
        return Err(Error::PanelMismatch("train and test panels differ".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyProtocol("empty train or test split".into()));
    }
    let c = train.channels();
    let ti = to_f64(&train.channel_values(i));
    let mut best: Option<(usize, f64)> = None;
    for j in (0..c).filter(|&j| j != i) {
        let score = if spatial {
            let per: Vec<Correlation> = train
                .samples()
                .iter()
                .map(|s| pearson(&to_f64(s.channel(i)), &to_f64(s.channel(j))))
                .collect::<Result<_>>()?;
            mean_valid(&per)
        } else {
            pearson(&ti, &to_f64(&train.channel_values(j)))?.r
        };
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((j, score));
        }
    }
    let (j, _) = best.ok_or_else(|| Error::EmptyProtocol("panel has a single channel".into()))?;
    let (mi, si) = mean_sd(&ti);
    let tj = to_f64(&test.channel_values(j));
    let (mj, sj) = mean_sd(&tj);
    let pred: Vec<f64> = tj.iter().map(|v| if sj > 0.0 { (v - mj) / sj * si + mi } else { mi }).collect();
    let r = pearson(&pred, &to_f64(&test.channel_values(i)))?;
    Ok(BaselineResult {
        method: if spatial { "most-spatially-correlated" } else { "most-correlated" }.into(),
        target: target.into(),
        source: Some(train.panel().names()[j].clone()),
        r: r.r,
        degenerate: r.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrrConfig {
    pub lambda: f64,
    /// RBF length scale; `None` uses the median pairwise distance.
    pub bandwidth: Option<f64>,
    pub max_train_pixels: usize,
    pub seed: u64,
}

impl Default for KrrConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, bandwidth: None, max_train_pixels: 4096, seed: 0 }
    }
}

/// Per-pixel feature rows (all channels except `target`) and target values.
fn pixel_table(d: &Dataset, target: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in d.samples() {
        for p in 0..s.pixels() {
            xs.push((0..d.channels()).filter(|&c| c != target).map(|c| s.channel(c)[p] as f64).collect());
            ys.push(s.channel(target)[p] as f64);
        }
    }
    (xs, ys)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RBF kernel ridge regression from the other channels at a pixel to the
/// target channel at that pixel.
pub fn baseline_krr(train: &Dataset, test: &Dataset, target: &str, cfg: &KrrConfig) -> Result<BaselineResult> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::SingularSystem(format!("ridge lambda must be positive, got {}", cfg.lambda)));
    }
    let i = train.panel().index_of(target).ok_or_else(|| Error::UnknownChannel(target.into()))?;
    if test.panel() != train.panel() {
        return Err(Error::PanelMismatch("train and test panels differ".into()));
    }
    let (xs, ys) = pixel_table(train, i);
    if xs.len() < 2 {
        return Err(Error::TooShort(xs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.max_train_pixels.min(xs.len()).max(2);
    let mut picks = sample_indices(&mut rng, xs.len(), m).into_vec();
    picks.sort_unstable();
    let xs: Vec<&Vec<f64>> = picks.iter().map(|&k| &xs[k]).collect();
    let ys: Vec<f64> = picks.iter().map(|&k| ys[k]).collect();
    let bandwidth = match cfg.bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {b}"))),
        None => {
            let mut d: Vec<f64> = Vec::new();
            let step = (m / 200).max(1);
            for a in (0..m).step_by(step) {
                for b in (a + 1..m).step_by(step) {
                    d.push(sq_dist(xs[a], xs[b]).sqrt());
                }
            }
            crate::stats::median(&d).filter(|v| *v > 0.0).unwrap_or(1.0)
        }
    };
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let y_mean = sum(ys.iter().copied()) / m as f64;
    let mut k = DMatrix::<f64>::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = (-gamma * sq_dist(xs[a], xs[b])).exp();
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
        k[(a, a)] += cfg.lambda;
    }
    let chol = k.cholesky().ok_or_else(|| Error::SingularSystem("kernel matrix is not positive definite".into()))?;
    let alpha = chol.solve(&DVector::from_iterator(m, ys.iter().map(|y| y - y_mean)));
    let (tx, ty) = pixel_table(test, i);
    let pred: Vec<f64> = tx
        .iter()
        .map(|x| {
            let mut acc = CompensatedSum::default();
            for (a, xa) in xs.iter().enumerate() {
                acc.add(alpha[a] * (-gamma * sq_dist(x, xa)).exp());
            }
            y_mean + acc.value()
        })
        .collect();
    let r = pearson(&pred, &ty)?;
    Ok(BaselineResult { method: "krr".into(), target: target.into(), source: None, r: r.r, degenerate: r.degenerate })
}

/// Union panel: all of `a`'s channels, then `b`'s channels that `a` lacks.
/// Returns the panel and the shared channel names.
pub fn union_panel(a: &ChannelPanel, b: &ChannelPanel) -> Result<(ChannelPanel, Vec<String>)> {
    let shared: Vec<String> = a.names().iter().filter(|n| b.index_of(n).is_some()).cloned().collect();
    if shared.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut names = a.names().to_vec();
    names.extend(b.names().iter().filter(|n| a.index_of(n).is_none()).cloned());
    Ok((ChannelPanel::new(names)?, shared))
}

/// Re-expresses `d` over `panel`, zero-filling channels `d` lacks. Returns
/// the padded data and the per-channel presence flags.
pub fn pad_to_panel(d: &Dataset, panel: &Arc<ChannelPanel>) -> Result<(Dataset, Vec<bool>)> {
    let present: Vec<bool> = panel.names().iter().map(|n| d.panel().index_of(n).is_some()).collect();
    let px = d.height() * d.width();
    let samples = d
        .samples()
        .iter()
        .map(|s| {
            let mut data = vec![0f32; panel.count() * px];
            for (u, name) in panel.names().iter().enumerate() {
                if let Some(src) = d.panel().index_of(name) {
                    data[u * px..(u + 1) * px].copy_from_slice(s.channel(src));
                }
            }
            MultiChannelSample::new(panel.clone(), d.height(), d.width(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(panel.clone(), d.height(), d.width(), d.split(), samples)?, present))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupRow {
    pub setup: String,
    pub channel: String,
    pub r: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionReport {
    pub rows: Vec<SetupRow>,
    pub union_mean: f64,
    pub intersection_mean: f64,
    pub shared: Vec<String>,
}

impl UnionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setup,channel,r,degenerate\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.setup, r.channel, r.r, r.degenerate));
        }
        s
    }
}

/// Shared settings of the experiments that train their own models.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub schedule: NoiseSchedule,
    pub clip_percentile: f64,
}

/// Scores single-channel imputation of `targets` pooled over several test
/// sets, each with its own presence flags.
fn pooled_single_channel(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    tests: &[(&Dataset, Vec<bool>)],
    targets: &[String],
    cfg: &SamplerConfig,
) -> Result<Vec<(String, Correlation)>> {
    let mut out = Vec::new();
    for name in targets {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for (d, present) in tests {
            let i = d.panel().index_of(name).ok_or_else(|| Error::UnknownChannel(name.clone()))?;
            let mut observed = present.clone();
            observed[i] = false;
            let inputs: Vec<&MultiChannelSample> = d.samples().iter().collect();
            let preds = predict(net, schedule, &inputs, &vec![ChannelMask::new(observed); inputs.len()], cfg)?;
            let px = d.height() * d.width();
            for (pr, s) in preds.iter().zip(&inputs) {
                p.extend(to_f64(&pr[i * px..(i + 1) * px]));
                t.extend(to_f64(s.channel(i)));
            }
        }
        out.push((name.clone(), pearson(&p, &t)?));
    }
    Ok(out)
}

/// Trains an intersection model (shared channels only) and a union model
/// (all channels, absent ones zero-filled, always masked and left out of
/// the loss), then compares single-channel imputation of the shared channels.
pub fn eval_union_intersection(
    a_train: &Dataset,
    b_train: &Dataset,
    a_test: &Dataset,
    b_test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<UnionReport> {
    let (upanel, shared) = union_panel(a_train.panel(), b_train.panel())?;
    let upanel = Arc::new(upanel);
    let norm = |train: &Dataset, test: &Dataset| -> Result<(Dataset, Dataset)> {
        let tr = normalize_per_channel(train, cfg.clip_percentile)?;
        let te = apply_stats(test, tr.stats().expect("normalized"))?;
        Ok((tr, te))
    };
    let (a_tr, a_te) = norm(a_train, a_test)?;
    let (b_tr, b_te) = norm(b_train, b_test)?;

    let restrict = |d: &Dataset| -> Result<Dataset> {
        let idx = d.panel().indices_of(&shared)?;
        d.select_channels(&idx)
    };
    let inter_train = Dataset::concat(&[&restrict(&a_tr)?, &restrict(&b_tr)?])?;
    let inter_tests = [restrict(&a_te)?, restrict(&b_te)?];
    let inter_net_cfg = NetworkConfig { channels: shared.len(), ..cfg.network.clone() };
    let inter = train(&TrainingSet::new(inter_train), &cfg.train, &inter_net_cfg, &cfg.schedule, None, None)?;
    let all_present = vec![true; shared.len()];
    let tests: Vec<(&Dataset, Vec<bool>)> = inter_tests.iter().map(|d| (d, all_present.clone())).collect();
    let inter_r = pooled_single_channel(&inter.state.inference_net()?, &cfg.schedule, &tests, &shared, &cfg.sampler)?;

    let (ua, pa) = pad_to_panel(&a_tr, &upanel)?;
    let (ub, pb) = pad_to_panel(&b_tr, &upanel)?;
    let presence: Vec<Vec<bool>> =
        std::iter::repeat(pa.clone()).take(ua.len()).chain(std::iter::repeat(pb.clone()).take(ub.len())).collect();
    let union_train = TrainingSet::with_presence(Dataset::concat(&[&ua, &ub])?, presence)?;
    let union_net_cfg = NetworkConfig { channels: upanel.count(), ..cfg.network.clone() };
    let union = train(&union_train, &cfg.train, &union_net_cfg, &cfg.schedule, None, None)?;
    let (ua_te, _) = pad_to_panel(&a_te, &upanel)?;
    let (ub_te, _) = pad_to_panel(&b_te, &upanel)?;
    let tests = [(&ua_te, pa), (&ub_te, pb)];
    let union_r = pooled_single_channel(&union.state.inference_net()?, &cfg.schedule, &tests, &shared, &cfg.sampler)?;

    let mut rows = Vec::new();
    for (setup, rs) in [("intersection", &inter_r), ("union", &union_r)] {
        for (name, c) in rs {
            rows.push(SetupRow { setup: setup.into(), channel: name.clone(), r: c.r, degenerate: c.degenerate });
        }
    }
    let m = |rs: &[(String, Correlation)]| mean_valid(&rs.iter().map(|(_, c)| *c).collect::<Vec<_>>());
    Ok(UnionReport { union_mean: m(&union_r), intersection_mean: m(&inter_r), rows, shared })
}

/// One architecture of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub injection: InjectionMode,
    pub unet_attention: UnetAttention,
    pub output_attention: bool,
    pub conditional: bool,
}

impl AblationRow {
    pub fn apply(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            injection: self.injection,
            unet_attention: self.unet_attention,
            output_attention: self.output_attention,
            conditional: self.conditional,
            ..base.clone()
        }
    }
}

/// The four architectures compared by default: the full model, SE-gated
/// injection alone, additive injection alone, and no conditioning.
pub fn default_grid() -> Vec<AblationRow> {
    let row = |name: &str, injection, unet_attention, output_attention, conditional| AblationRow {
        name: name.into(),
        injection,
        unet_attention,
        output_attention,
        conditional,
    };
    vec![
        row("full", InjectionMode::SeGate, UnetAttention::Full, true, true),
        row("injection-se", InjectionMode::SeGate, UnetAttention::None, false, true),
        row("injection-add", InjectionMode::Add, UnetAttention::None, false, true),
        row("unconditional", InjectionMode::SeGate, UnetAttention::None, false, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub mean_r: f64,
    pub params: usize,
    pub report: EvalReport,
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("name,injection,unet_attention,output_attention,conditional,params,mean_r\n");
    for r in results {
        let inj = match r.row.injection {
            InjectionMode::Add => "add",
            InjectionMode::SeGate => "se_gate",
        };
        let ua = match r.row.unet_attention {
            UnetAttention::None => "none",
            UnetAttention::Se => "se",
            UnetAttention::Full => "full",
        };
        s.push_str(&format!(
            "{},{inj},{ua},{},{},{},{}\n",
            r.row.name, r.row.output_attention, r.row.conditional, r.params, r.mean_r
        ));
    }
    s
}

/// Trains every grid row with the same seed and budget and scores it with
/// the single-channel protocol on `targets` (default all channels).
/// `train` and `test` must already be normalized.
pub fn run_ablation(
    train_set: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
    grid: &[AblationRow],
    targets: Option<&[usize]>,
) -> Result<Vec<AblationResult>> {
    if grid.is_empty() {
        return Err(Error::EmptyProtocol("empty ablation grid".into()));
    }
    let set = TrainingSet::new(train_set.clone());
    grid.iter()
        .map(|row| {
            let net_cfg = row.apply(&cfg.network);
            let res = train(&set, &cfg.train, &net_cfg, &cfg.schedule, None, None)?;
            let report = eval_single_channel(&res.state.inference_net()?, &cfg.schedule, test, &cfg.sampler, targets, None)?;
            Ok(AblationResult { row: row.clone(), mean_r: report.mean_r_p, params: res.state.net.num_params(), report })
        })
        .collect()
}
