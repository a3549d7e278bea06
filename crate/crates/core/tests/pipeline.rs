use candle_core::DType;
use panel_diffusion::checkpoint::Checkpoint;
use panel_diffusion::data::{apply_stats, normalize_per_channel, read_container, write_container, Split};
use panel_diffusion::eval::{eval_single_channel, score_channels};
use panel_diffusion::network::NetworkConfig;
use panel_diffusion::sampling::{impute, SamplerConfig};
use panel_diffusion::schedule::{NoiseSchedule, ScheduleKind};
use panel_diffusion::synth;
use panel_diffusion::training::{fixed_channel_mode, train, TrainConfig, TrainOutput, TrainingSet};

fn tiny_net(channels: usize, h: usize, w: usize) -> NetworkConfig {
    NetworkConfig {
        channels,
        height: h,
        width: w,
        timesteps: 20,
        base_width: 8,
        attention_dim: 4,
        time_dim: 8,
        ..NetworkConfig::default()
    }
}

#[test]
fn single_cell_runs_through_the_spatial_pipeline() {
    let mut spec = synth::singlecell_basic(1);
    spec.samples = 64;
    spec.test_samples = 16;
    let (train_raw, template) = synth::gen_singlecell(&spec, Split::Train).unwrap();
    let (test_raw, _) = synth::gen_singlecell(&spec, Split::Test).unwrap();
    let train_set = normalize_per_channel(&train_raw, 0.99).unwrap();
    let test = apply_stats(&test_raw, train_set.stats().unwrap()).unwrap();
    let cfg = fixed_channel_mode(
        &TrainConfig { steps: 4, batch_size: 8, lr: 1e-3, ..TrainConfig::default() },
        &spec.targets,
        train_set.panel(),
    )
    .unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let res = train(&TrainingSet::new(train_set), &cfg, &NetworkConfig { attention_dim: 1, ..tiny_net(40, 1, 1) }, &schedule, Some(&out), None).unwrap();
    let ck = Checkpoint::load(res.checkpoint.unwrap()).unwrap();

    let sampler = SamplerConfig { steps: 5, num_samples: 2, ..SamplerConfig::default() };
    let samples = impute(&ck, &test, &template, &sampler).unwrap();
    assert_eq!(samples.len(), 16);
    assert!(samples.iter().all(|k| k.len() == 2 && k.iter().all(|s| s.len() == 40)));

    let flat: Vec<f32> = samples.iter().map(|k| k[0].clone()).flatten().collect();
    let pred = panel_diffusion::data::Dataset::from_flat(test.panel().clone(), 1, 1, Split::Test, flat).unwrap();
    let scores = score_channels(&pred, &test, &template).unwrap();
    assert_eq!(scores.per_channel.len(), 8);

    let targets: Vec<usize> = template.missing_indices();
    let report = eval_single_channel(&ck.denoiser().unwrap(), &schedule, &test, &sampler, Some(&targets), None).unwrap();
    assert_eq!(report.rows.len(), 8);
}

#[test]
fn stats_mismatch_is_rejected() {
    let mut spec = synth::spatial_basic(2);
    spec.height = 4;
    spec.width = 4;
    spec.samples = 8;
    let raw = synth::gen_spatial(&spec).unwrap();
    let norm = normalize_per_channel(&raw, 0.99).unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
    let cfg = TrainConfig { steps: 1, batch_size: 2, ..TrainConfig::default() };
    let res = train(&TrainingSet::new(norm.clone()), &cfg, &tiny_net(8, 4, 4), &schedule, None, None).unwrap();
    let ck = res.state.to_checkpoint(&cfg, &schedule, &norm).unwrap();
    let mask = panel_diffusion::data::ChannelMask::with_missing(8, &[3]);
    let sampler = SamplerConfig { steps: 2, num_samples: 1, ..SamplerConfig::default() };
    assert!(impute(&ck, &norm, &mask, &sampler).is_ok());
    let other = normalize_per_channel(&raw, 0.9).unwrap();
    assert!(matches!(impute(&ck, &other, &mask, &sampler), Err(panel_diffusion::Error::StatsMismatch)));
    assert!(matches!(impute(&ck, &raw, &mask, &sampler), Err(panel_diffusion::Error::StatsMismatch)));
}

#[test]
fn containers_and_checkpoints_round_trip_bit_exactly() {
    let mut spec = synth::spatial_basic(3);
    spec.height = 6;
    spec.width = 4;
    spec.samples = 5;
    let d = normalize_per_channel(&synth::gen_spatial(&spec).unwrap(), 0.99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mct");
    write_container(&d, &path).unwrap();
    let back = read_container(&path).unwrap();
    assert_eq!(back.stats(), d.stats());
    for (a, b) in back.samples().iter().zip(d.samples()) {
        let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }

    let net = panel_diffusion::network::Denoiser::new(tiny_net(8, 6, 4), 3, DType::F32).unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
    let cfg = TrainConfig::default();
    let state = panel_diffusion::training::TrainState::new(net, &cfg).unwrap();
    let ck = state.to_checkpoint(&cfg, &schedule, &d).unwrap();
    let ck_path = dir.path().join("c.mck");
    ck.save(&ck_path).unwrap();
    let again = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(again.to_bytes().unwrap(), ck.to_bytes().unwrap());
}
