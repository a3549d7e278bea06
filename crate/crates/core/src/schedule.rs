//! Noise schedules, the closed-form forward process, the score conversion and
//! the ancestral reverse step.
//!
//! `alpha_bar[t]` is the cumulative signal coefficient: `x_t` has mean
//! `sqrt(alpha_bar[t]) * x0` and variance `1 - alpha_bar[t]`. Per-step
//! coefficients are recovered as ratios `alpha_bar[t] / alpha_bar[t - 1]`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Betas linear in `t`, rescaled so the total noise is independent of `T`.
    Linear,
    /// Squared-cosine cumulative schedule with offset `s = 0.008`.
    Cosine,
    /// Explicit `alpha_bar` table.
    Custom,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown schedule kind {other:?} (linear|cosine)"))),
        }
    }
}

/// Variance used for the noise injected by each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `sigma^2 = 1 - a_t`.
    #[default]
    Beta,
    /// `sigma^2 = (1 - a_t) (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])`.
    BetaTilde,
    /// No injected noise.
    Deterministic,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" | "stochastic" => Ok(Self::Beta),
            "beta-tilde" => Ok(Self::BetaTilde),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::InvalidConfig(format!(
                "unknown sigma mode {other:?} (beta|beta-tilde|deterministic)"
            ))),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    timesteps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::BadTimesteps(timesteps));
        }
        let t_f = timesteps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_f;
                let (start, end) = (1e-4 * scale, 0.02 * scale);
                (0..timesteps)
                    .map(|i| {
                        let b = start + (end - start) * i as f64 / (t_f - 1.0);
                        b.min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / t_f + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=timesteps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Custom => {
                return Err(Error::InvalidConfig("custom schedules are built with from_alpha_bar".into()))
            }
        };
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let s = Self { kind, timesteps, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    /// Builds a schedule from an explicit table (`alpha_bar[0]` must be 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::BadTimesteps(alpha_bar.len().saturating_sub(1)));
        }
        let s = Self { kind: ScheduleKind::Custom, timesteps: alpha_bar.len() - 1, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab[0] != 1.0 {
            return Err(Error::InvalidConfig(format!("alpha_bar[0] = {} (must be 1)", ab[0])));
        }
        if ab.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidConfig("alpha_bar entries must lie in (0, 1]".into()));
        }
        if ab.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("alpha_bar must be strictly decreasing".into()));
        }
        if ab[self.timesteps] >= 1e-3 {
            return Err(Error::InvalidConfig(format!(
                "alpha_bar[T] = {} leaves too much signal (needs < 1e-3)",
                ab[self.timesteps]
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step signal coefficient `a_t = alpha_bar[t] / alpha_bar[t - 1]`.
    pub fn step_alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.alpha_bar[t] / self.alpha_bar[t - 1])
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.timesteps {
            return Err(Error::TimestepOutOfRange { t, lo, hi: self.timesteps });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, 0)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
        }
        let ab = self.alpha_bar[t];
        Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// Batched forward process: item `i` of the leading axis uses timestep `ts[i]`.
    pub fn forward_sample_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
        }
        if x0.dim(0)? != ts.len() {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {}", ts.len(), x0.dim(0)?)));
        }
        for &t in ts {
            self.check_t(t, 0)?;
        }
        let mut bshape = vec![ts.len()];
        bshape.extend(std::iter::repeat(1).take(x0.rank() - 1));
        let signal: Vec<f64> = ts.iter().map(|&t| self.alpha_bar[t].sqrt()).collect();
        let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bar[t]).sqrt()).collect();
        let signal = Tensor::new(signal, x0.device())?.to_dtype(x0.dtype())?.reshape(bshape.as_slice())?;
        let noise = Tensor::new(noise, x0.device())?.to_dtype(x0.dtype())?.reshape(bshape.as_slice())?;
        Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }

    /// Score estimate `-eps_hat / sqrt(1 - alpha_bar[t])`.
    pub fn score_from_eps(&self, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, 1)?;
        Ok(eps_hat.affine(-1.0 / (1.0 - self.alpha_bar[t]).sqrt(), 0.0)?)
    }

    /// Noise prediction consistent with the clean estimate
    /// `(x_t - sqrt(1 - ab) eps) / sqrt(ab)` clamped to `[lo, hi]`. Near
    /// `t = T` the unclamped estimate divides by a tiny `sqrt(ab)`, so small
    /// errors in `eps_hat` would otherwise swamp the chain.
    pub fn clip_eps(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize, lo: f64, hi: f64) -> Result<Tensor> {
        self.check_t(t, 1)?;
        let ab = self.alpha_bar[t];
        let x0 = ((x_t - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?).clamp(lo, hi)?;
        Ok((x_t - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    }

    /// One ancestral step `t -> t - 1`. `z` is ignored at `t = 1` and in
    /// deterministic mode.
    pub fn posterior_step(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        z: Option<&Tensor>,
        mode: SigmaMode,
    ) -> Result<Tensor> {
        self.check_t(t, 1)?;
        self.posterior_step_between(x_t, eps_hat, t, t - 1, z, mode)
    }

    /// Ancestral step from `t` to any earlier `t_prev`, treating the pair as a
    /// single transition with `a = alpha_bar[t] / alpha_bar[t_prev]`. Used by
    /// strided (subsampled) reverse chains.
    pub fn posterior_step_between(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
        z: Option<&Tensor>,
        mode: SigmaMode,
    ) -> Result<Tensor> {
        self.check_t(t, 1)?;
        if t_prev >= t {
            return Err(Error::TimestepOutOfRange { t: t_prev, lo: 0, hi: t - 1 });
        }
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::ShapeMismatch(format!("x_t {:?} vs eps_hat {:?}", x_t.dims(), eps_hat.dims())));
        }
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t_prev];
        let a = ab_t / ab_prev;
        let b = 1.0 - a;
        let inv_sqrt_a = 1.0 / a.sqrt();
        let mean = (x_t.affine(inv_sqrt_a, 0.0)? - eps_hat.affine(inv_sqrt_a * b / (1.0 - ab_t).sqrt(), 0.0)?)?;
        let variance = match mode {
            _ if t_prev == 0 => 0.0,
            SigmaMode::Deterministic => 0.0,
            SigmaMode::Beta => b,
            SigmaMode::BetaTilde => b * (1.0 - ab_prev) / (1.0 - ab_t),
        };
        match z {
            Some(z) if variance > 0.0 => {
                if z.shape() != x_t.shape() {
                    return Err(Error::ShapeMismatch(format!("z {:?} vs x_t {:?}", z.dims(), x_t.dims())));
                }
                Ok((mean + z.affine(variance.sqrt(), 0.0)?)?)
            }
            _ => Ok(mean),
        }
    }

    /// `steps` distinct timesteps in descending order, evenly strided over
    /// `1..=T` and always starting at `T`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps {
            return Err(Error::InvalidConfig(format!("sampling steps {steps} not in 1..={}", self.timesteps)));
        }
        let t = self.timesteps as f64;
        let mut ts: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * t / steps as f64).round() as usize).clamp(1, self.timesteps))
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn t64(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(v, n, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn boundary_and_monotonicity() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t in [2, 3, 10, 100, 400, 1000] {
                let s = NoiseSchedule::new(kind, t).unwrap();
                assert_eq!(s.alpha_bar()[0], 1.0);
                assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
                assert!(s.alpha_bar()[t] < 1e-3);
                for k in 1..=t {
                    let a = s.step_alpha(k).unwrap();
                    assert!(a > 0.0 && a < 1.0);
                }
            }
        }
        assert!(matches!(NoiseSchedule::new(ScheduleKind::Cosine, 1), Err(Error::BadTimesteps(1))));
    }

    #[test]
    fn cosine_end_matches_formula() {
        // Direct evaluation of the squared-cosine curve; the last step is
        // capped at beta = 0.999.
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let expected_999 = f(999.0) / f(0.0);
        assert!((s.alpha_bar()[999] - expected_999).abs() < 1e-9 * expected_999.max(1e-12) + 1e-12);
        assert!(s.alpha_bar()[1000] < 1e-3);
        assert!((s.alpha_bar()[1000] - expected_999 * 0.001).abs() < 1e-12);
    }

    #[test]
    fn linear_is_cumprod_of_linear_betas() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        let mut acc = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar()[t] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sample_boundaries() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = t64(randn(&mut rng, 64));
        let eps = t64(randn(&mut rng, 64));
        assert_eq!(vals(&s.forward_sample(&x0, 0, &eps).unwrap()), vals(&x0));
        let xt = vals(&s.forward_sample(&x0, 100, &eps).unwrap());
        let e = vals(&eps);
        let x = vals(&x0);
        let err: f64 = xt.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bound = s.alpha_bar()[100].sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt()
            + (1.0 - (1.0 - s.alpha_bar()[100]).sqrt()) * e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= bound + 1e-12);
        assert!(matches!(s.forward_sample(&x0, 101, &eps), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(
            s.forward_sample(&x0, 1, &t64(vec![0.0; 3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_sample_is_linear() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x1, x2, e1, e2) = (randn(&mut rng, 32), randn(&mut rng, 32), randn(&mut rng, 32), randn(&mut rng, 32));
        for t in [1, 17, 50] {
            let lhs = vals(
                &s.forward_sample(
                    &t64(x1.iter().zip(&x2).map(|(a, b)| 2.0 * a - 0.5 * b).collect()),
                    t,
                    &t64(e1.iter().zip(&e2).map(|(a, b)| 2.0 * a - 0.5 * b).collect()),
                )
                .unwrap(),
            );
            let f1 = vals(&s.forward_sample(&t64(x1.clone()), t, &t64(e1.clone())).unwrap());
            let f2 = vals(&s.forward_sample(&t64(x2.clone()), t, &t64(e2.clone())).unwrap());
            for i in 0..32 {
                assert!((lhs[i] - (2.0 * f1[i] - 0.5 * f2[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.75, 0.1, 1e-4]).unwrap();
        let zero = t64(vec![0.0; 4]);
        assert!(vals(&s.score_from_eps(&zero, 1).unwrap()).iter().all(|&v| v == 0.0));
        let ones = t64(vec![1.0; 4]);
        // -1 / sqrt(1 - 0.75) = -2
        for v in vals(&s.score_from_eps(&ones, 1).unwrap()) {
            assert!((v + 2.0).abs() < 1e-12);
        }
        assert!(vals(&s.score_from_eps(&ones, 2).unwrap()).iter().all(|&v| v < 0.0));
        assert!(s.score_from_eps(&ones, 0).is_err());
    }

    #[test]
    fn posterior_step_with_true_eps_gives_posterior_mean() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = t64(randn(&mut rng, 48));
        let eps = t64(randn(&mut rng, 48));
        for t in [1, 2, 57, 150, 200] {
            let xt = s.forward_sample(&x0, t, &eps).unwrap();
            let prev = vals(&s.posterior_step(&xt, &eps, t, None, SigmaMode::Deterministic).unwrap());
            // mean of q(x_{t-1} | x_t, x0): sqrt(ab') x0 + sqrt(a) (1 - ab') / sqrt(1 - ab) eps
            let (ab, abp) = (s.alpha_bar()[t], s.alpha_bar()[t - 1]);
            let a = ab / abp;
            let ce = a.sqrt() * (1.0 - abp) / (1.0 - ab).sqrt();
            let want: Vec<f64> = vals(&x0).iter().zip(vals(&eps)).map(|(x, e)| abp.sqrt() * x + ce * e).collect();
            for (a, b) in prev.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "t={t}: {a} vs {b}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn kind() -> impl Strategy<Value = ScheduleKind> {
            prop::sample::select(vec![ScheduleKind::Linear, ScheduleKind::Cosine])
        }

        proptest! {
            #[test]
            fn step_ratios_lie_in_the_open_unit_interval(k in kind(), total in 2usize..600) {
                let s = NoiseSchedule::new(k, total).unwrap();
                let ab = s.alpha_bar();
                prop_assert_eq!(ab[0], 1.0);
                prop_assert!(ab[total] < 1e-3);
                for t in 1..=total {
                    let a = ab[t] / ab[t - 1];
                    prop_assert!(a > 0.0 && a < 1.0, "t={} a={}", t, a);
                }
            }

            #[test]
            fn forward_sample_is_linear(k in kind(), t in 0usize..=50, seed in 0u64..500, alpha in -3.0f64..3.0) {
                let s = NoiseSchedule::new(k, 50).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (x1, x2, e1, e2) = (randn(&mut rng, 10), randn(&mut rng, 10), randn(&mut rng, 10), randn(&mut rng, 10));
                let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p + alpha * q).collect::<Vec<_>>();
                let lhs = vals(&s.forward_sample(&t64(mix(&x1, &x2)), t, &t64(mix(&e1, &e2))).unwrap());
                let f1 = vals(&s.forward_sample(&t64(x1), t, &t64(e1)).unwrap());
                let f2 = vals(&s.forward_sample(&t64(x2), t, &t64(e2)).unwrap());
                for (l, r) in lhs.iter().zip(mix(&f1, &f2)) {
                    prop_assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
                }
            }

            #[test]
            fn strided_timesteps_descend_from_t(total in 2usize..500, frac in 0.0f64..1.0) {
                let s = NoiseSchedule::new(ScheduleKind::Cosine, total).unwrap();
                let steps = 1 + ((total - 1) as f64 * frac) as usize;
                let ts = s.strided_timesteps(steps).unwrap();
                prop_assert_eq!(ts[0], total);
                prop_assert_eq!(ts.len(), steps);
                prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
                prop_assert!(*ts.last().unwrap() >= 1);
            }
        }
    }

    #[test]
    fn clipped_eps_matches_the_clamped_clean_estimate() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0: Vec<f64> = randn(&mut rng, 40).iter().map(|v| 0.5 + 0.8 * v).collect();
        let eps = t64(randn(&mut rng, 40));
        for t in [1, 30, 100] {
            let xt = s.forward_sample(&t64(x0.clone()), t, &eps).unwrap();
            let clipped = vals(&s.clip_eps(&xt, &eps, t, 0.0, 1.0).unwrap());
            let ab = s.alpha_bar()[t];
            for ((c, x), (e, x_t)) in clipped.iter().zip(&x0).zip(vals(&eps).iter().zip(vals(&xt))) {
                let want = if (0.0..=1.0).contains(x) { *e } else { (x_t - ab.sqrt() * x.clamp(0.0, 1.0)) / (1.0 - ab).sqrt() };
                assert!((c - want).abs() <= 1e-6 * want.abs().max(1.0), "t={t}: {c} vs {want}");
            }
        }
    }

    #[test]
    fn posterior_step_ignores_noise_at_t1_and_is_deterministic() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
        let x = t64(vec![0.3; 6]);
        let e = t64(vec![-0.2; 6]);
        let z = t64(vec![5.0; 6]);
        let a = vals(&s.posterior_step(&x, &e, 1, Some(&z), SigmaMode::Beta).unwrap());
        let b = vals(&s.posterior_step(&x, &e, 1, None, SigmaMode::Beta).unwrap());
        assert_eq!(a, b);
        let c = s.posterior_step(&x, &e, 7, Some(&z), SigmaMode::Deterministic).unwrap();
        let d = s.posterior_step(&x, &e, 7, Some(&z), SigmaMode::Deterministic).unwrap();
        assert_eq!(vals(&c), vals(&d));
        assert_eq!(c.dims(), x.dims());
        let noisy = vals(&s.posterior_step(&x, &e, 7, Some(&z), SigmaMode::Beta).unwrap());
        assert_ne!(noisy, vals(&c));
    }

    #[test]
    fn strided_timesteps_descend_from_t() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 400).unwrap();
        let ts = s.strided_timesteps(25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 400);
        assert_eq!(*ts.last().unwrap(), 16);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.strided_timesteps(400).unwrap(), (1..=400).rev().collect::<Vec<_>>());
        assert!(s.strided_timesteps(401).is_err());
    }
}
