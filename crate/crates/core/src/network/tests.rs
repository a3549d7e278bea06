use super::*;
use crate::data::{apply_mask, ChannelMask, ChannelPanel, MultiChannelSample};
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

fn tiny(channels: usize, size: usize) -> NetworkConfig {
    NetworkConfig {
        channels,
        height: size,
        width: size,
        timesteps: 50,
        levels: 2,
        base_width: 8,
        width_mults: vec![1, 2],
        attention_dim: 4,
        time_dim: 8,
        ..NetworkConfig::default()
    }
}

/// Replaces every parameter with small random values so no branch is inert.
fn randomize(net: &Denoiser, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, v) in net.params().iter() {
        let vals: Vec<f64> = (0..v.elem_count())
            .map(|_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        net.params().set_values(name, &vals).unwrap();
    }
}

fn random_sample(cfg: &NetworkConfig, seed: u64) -> MultiChannelSample {
    let names: Vec<String> = (0..cfg.channels).map(|i| format!("ch{i}")).collect();
    let panel = Arc::new(ChannelPanel::new(names).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.channels * cfg.height * cfg.width;
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    MultiChannelSample::new(panel, cfg.height, cfg.width, data).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

#[test]
fn default_config_is_valid() {
    NetworkConfig::default().validate().unwrap();
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut c = NetworkConfig { levels: 1, width_mults: vec![1], ..NetworkConfig::default() };
    assert!(c.validate().is_err());
    c = NetworkConfig { base_width: 4, ..NetworkConfig::default() };
    assert!(c.validate().is_err());
    c = NetworkConfig { se_reduction: 3, ..NetworkConfig::default() };
    assert!(c.validate().is_err());
    // bottleneck is 8x8 = 64 pixels
    c = NetworkConfig { attention_dim: 65, ..NetworkConfig::default() };
    assert!(c.validate().is_err());
    c = NetworkConfig { height: 15, ..NetworkConfig::default() };
    assert!(c.validate().is_err());
}

#[test]
fn contextual_features_halve_per_level() {
    let cfg = NetworkConfig { levels: 3, width_mults: vec![1, 2, 2], ..NetworkConfig::default() };
    let net = Denoiser::new(cfg.clone(), 3, DType::F32).unwrap();
    let x = random_sample(&cfg, 1);
    let c = apply_mask(&x, &ChannelMask::all_observed(cfg.channels)).unwrap();
    let feats = net.contextual_encode(&net.condition_tensor(&[&c]).unwrap()).unwrap();
    let dims: Vec<Vec<usize>> = feats.0.iter().map(|f| f.dims().to_vec()).collect();
    assert_eq!(dims, vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 32, 4, 4]]);
}

#[test]
fn features_depend_on_data_not_mask_bits() {
    let cfg = tiny(3, 8);
    let net = Denoiser::new(cfg.clone(), 3, DType::F64).unwrap();
    randomize(&net, 5);
    let x = random_sample(&cfg, 2);
    let a = apply_mask(&x, &ChannelMask::new(vec![true, false, true])).unwrap();
    let b = apply_mask(&a.as_sample(x.panel().clone()).unwrap(), &ChannelMask::all_observed(3)).unwrap();
    assert_ne!(a.mask(), b.mask());
    let fa = net.contextual_encode(&net.condition_tensor(&[&a]).unwrap()).unwrap();
    let fb = net.contextual_encode(&net.condition_tensor(&[&b]).unwrap()).unwrap();
    for (p, q) in fa.0.iter().zip(&fb.0) {
        assert_eq!(flat(p), flat(q));
    }
}

#[test]
fn denoise_shape_and_determinism() {
    let cfg = NetworkConfig::default();
    let net = Denoiser::new(cfg.clone(), 9, DType::F32).unwrap();
    randomize(&net, 1);
    let x = random_sample(&cfg, 4);
    let c = apply_mask(&x, &ChannelMask::with_missing(cfg.channels, &[1, 5])).unwrap();
    let a = net.denoise(x.data(), 37, &c).unwrap();
    let b = net.denoise(x.data(), 37, &c).unwrap();
    assert_eq!(a.len(), cfg.channels * cfg.height * cfg.width);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn same_seed_same_parameters() {
    let a = Denoiser::new(NetworkConfig::default(), 4, DType::F32).unwrap();
    let b = Denoiser::new(NetworkConfig::default(), 4, DType::F32).unwrap();
    for ((na, va), (nb, vb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(flat(va.as_tensor()), flat(vb.as_tensor()));
    }
}

#[test]
fn denoise_rejects_bad_inputs() {
    let cfg = tiny(2, 4);
    let net = Denoiser::new(cfg.clone(), 0, DType::F32).unwrap();
    let x = random_sample(&cfg, 0);
    let c = apply_mask(&x, &ChannelMask::all_observed(2)).unwrap();
    assert!(matches!(net.denoise(x.data(), 0, &c), Err(Error::TimestepOutOfRange { .. })));
    assert!(matches!(net.denoise(x.data(), 51, &c), Err(Error::TimestepOutOfRange { .. })));
    assert!(matches!(net.denoise(&x.data()[1..], 3, &c), Err(Error::ShapeMismatch(_))));
}

#[test]
fn observed_channel_perturbation_changes_output() {
    let cfg = NetworkConfig::default();
    let net = Denoiser::new(cfg.clone(), 2, DType::F32).unwrap();
    randomize(&net, 8);
    let x = random_sample(&cfg, 6);
    let mask = ChannelMask::with_missing(cfg.channels, &[0]);
    let c = apply_mask(&x, &mask).unwrap();
    let mut bumped = x.clone();
    for v in bumped.channel_mut(3) {
        *v += 0.1;
    }
    let c2 = apply_mask(&bumped, &mask).unwrap();
    let a = net.denoise(x.data(), 100, &c).unwrap();
    let b = net.denoise(x.data(), 100, &c2).unwrap();
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
    assert!(diff > 0.0);
}

#[test]
fn hot_pixel_stays_local_at_first_level() {
    let cfg = tiny(2, 16);
    let net = Denoiser::new(cfg.clone(), 1, DType::F64).unwrap();
    randomize(&net, 3);
    let planes = 2 * 16 * 16;
    let zero = Tensor::zeros((1, 2, 16, 16), DType::F64, &Device::Cpu).unwrap();
    let mut hot = vec![0f64; planes];
    let (r0, c0) = (7usize, 9usize);
    hot[16 * 16 + r0 * 16 + c0] = 1.0;
    let hot = Tensor::from_vec(hot, (1, 2, 16, 16), &Device::Cpu).unwrap();
    let fz = flat(&net.contextual_encode(&zero).unwrap().0[0]);
    let fh = flat(&net.contextual_encode(&hot).unwrap().0[0]);
    let width = fz.len() / 256;
    let mut changed_inside = false;
    for ch in 0..width {
        for r in 0..16 {
            for c in 0..16 {
                let i = ch * 256 + r * 16 + c;
                let d = (fz[i] - fh[i]).abs();
                let dist = r.abs_diff(r0).max(c.abs_diff(c0));
                if dist > 3 {
                    assert_eq!(d, 0.0, "change at ({r},{c}) outside receptive field");
                } else if d > 0.0 {
                    changed_inside = true;
                }
            }
        }
    }
    assert!(changed_inside);
}

#[test]
fn param_count_is_monotone_in_attention() {
    let base = NetworkConfig::default();
    let with = |ua, oa| NetworkConfig { unet_attention: ua, output_attention: oa, ..base.clone() };
    let none = count_params(&with(UnetAttention::None, true)).unwrap();
    let se = count_params(&with(UnetAttention::Se, true)).unwrap();
    let full = count_params(&with(UnetAttention::Full, true)).unwrap();
    assert!(none < se && se < full);
    let no_out = count_params(&with(UnetAttention::Full, false)).unwrap();
    assert!(no_out < full);
    assert_eq!(full, count_params(&with(UnetAttention::Full, true)).unwrap());
}

#[test]
fn strict_load_reports_missing_attention_level() {
    let cfg = NetworkConfig::default();
    let net = Denoiser::new(cfg.clone(), 0, DType::F32).unwrap();
    let mut store = ParamStore::new(DType::F32);
    for (name, v) in net.params().iter() {
        if !name.contains(".attn.") {
            store.insert(name.clone(), v.clone());
        }
    }
    match Denoiser::from_store(cfg.clone(), store) {
        Err(Error::LevelWeightsMissing(l)) => assert_eq!(l, cfg.levels - 1),
        other => panic!("expected LevelWeightsMissing, got {other:?}"),
    }
    let ok = Denoiser::from_store(cfg, net.params().clone()).unwrap();
    assert_eq!(ok.num_params(), net.num_params());
}

#[test]
fn unconditional_model_ignores_condition() {
    let cfg = NetworkConfig { conditional: false, ..tiny(3, 8) };
    let net = Denoiser::new(cfg.clone(), 0, DType::F64).unwrap();
    randomize(&net, 2);
    let x = random_sample(&cfg, 1);
    let y = random_sample(&cfg, 2);
    let cx = apply_mask(&x, &ChannelMask::all_observed(3)).unwrap();
    let cy = apply_mask(&y, &ChannelMask::all_observed(3)).unwrap();
    assert_eq!(net.denoise(x.data(), 5, &cx).unwrap(), net.denoise(x.data(), 5, &cy).unwrap());
}

#[test]
fn single_pixel_grid_is_supported() {
    let cfg = NetworkConfig {
        channels: 6,
        height: 1,
        width: 1,
        attention_dim: 1,
        ..NetworkConfig::default()
    };
    let net = Denoiser::new(cfg.clone(), 0, DType::F32).unwrap();
    randomize(&net, 0);
    let x = random_sample(&cfg, 0);
    let c = apply_mask(&x, &ChannelMask::with_missing(6, &[2])).unwrap();
    let e = net.denoise(x.data(), 3, &c).unwrap();
    assert_eq!(e.len(), 6);
    assert!(e.iter().all(|v| v.is_finite()));
}

#[test]
fn mask_indicators_widen_condition() {
    let cfg = NetworkConfig { mask_indicators: true, ..tiny(2, 4) };
    let net = Denoiser::new(cfg.clone(), 0, DType::F32).unwrap();
    let x = random_sample(&cfg, 0);
    let c = apply_mask(&x, &ChannelMask::new(vec![true, false])).unwrap();
    assert_eq!(net.condition_tensor(&[&c]).unwrap().dims(), &[1, 4, 4, 4]);
    assert_eq!(net.denoise(x.data(), 1, &c).unwrap().len(), 32);
}
