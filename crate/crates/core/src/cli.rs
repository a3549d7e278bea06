//! The `paneldiff` command line.
//!
//! Every command that trains or samples reads a [`RunConfig`]: a JSON file of
//! flat dotted keys (`"train.lr": 1e-3`), overridden by `--set key=value`
//! and by the dedicated flags. The effective configuration is written to
//! the output directory before any work starts.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{file_digest, Checkpoint};
use crate::data::{
    apply_stats, normalize_per_channel, read_container, read_manifest, read_split, write_container,
    write_dataset_dir, ChannelMask, Dataset, MultiChannelSample, Split, MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, baseline_krr, baseline_most_correlated, default_grid, eval_random_mask, eval_single_channel,
    eval_union_intersection, run_ablation, AblationRow, BaselineResult, ExperimentConfig, KrrConfig,
};
use crate::network::NetworkConfig;
use crate::sampling::{generate_unconditional, impute_samples, Provenance, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::synth::{self, Preset, SynthSpec, PRESET_NAMES};
use crate::training::{fixed_channel_mode, sample_mask, train, TrainConfig, TrainOutput, TrainingSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Maps a library error onto the exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Disk { .. } | Error::BadMagic(_) | Error::TruncatedFile(_) | Error::VersionUnsupported(_) => {
            EXIT_IO
        }
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::SingularSystem(_) | Error::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, timesteps: 400 }
    }
}

/// Everything a run can be configured with. `network.channels`, `height`,
/// `width` and `timesteps` are filled in from the data and the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleParams,
    pub clip_percentile: f64,
    pub krr: KrrConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: ScheduleParams::default(),
            clip_percentile: 0.99,
            krr: KrrConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted-key view of any serializable value.
pub fn flatten(v: &impl Serialize) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    flatten_into("", &serde_json::to_value(v)?, &mut out);
    Ok(out)
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::InvalidConfig(format!("unknown config key {key:?}"));
    let mut node = root;
    for part in key.split('.') {
        node = node.as_object_mut().ok_or_else(unknown)?.get_mut(part).ok_or_else(unknown)?;
    }
    if node.is_object() {
        return Err(unknown());
    }
    *node = value;
    Ok(())
}

/// Parses a flag value as JSON, falling back to a bare string.
fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

impl RunConfig {
    /// Defaults, then the dotted keys of `file`, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::disk(path, e))?;
            let flat: BTreeMap<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            for (k, v) in flat {
                set_dotted(&mut root, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut root, k, v.clone())?;
        }
        serde_json::from_value(root).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.timesteps)
    }

    /// The network configuration for data of the given shape.
    pub fn network_for(&self, channels: usize, height: usize, width: usize) -> NetworkConfig {
        NetworkConfig { channels, height, width, timesteps: self.schedule.timesteps, ..self.network.clone() }
    }

    pub fn experiment(&self, channels: usize, height: usize, width: usize) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            network: self.network_for(channels, height, width),
            train: self.train.clone(),
            sampler: self.sampler.clone(),
            schedule: self.noise_schedule()?,
            clip_percentile: self.clip_percentile,
        })
    }

    /// Writes the flat effective configuration plus the command's paths.
    pub fn echo(&self, dir: &Path, command: &str, paths: &[(&str, &Path)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::disk(dir, e))?;
        let mut flat = flatten(self)?;
        flat.insert("command".into(), Value::String(command.into()));
        for (name, p) in paths {
            flat.insert(format!("paths.{name}"), Value::String(p.display().to_string()));
        }
        let path = dir.join("run_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&flat)? + "\n").map_err(|e| Error::disk(&path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "paneldiff", version, about = "Impute missing channels of multi-channel images with a conditional diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file of flat dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key: --set train.steps=200 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for training and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        if let Some(seed) = self.seed {
            out.push(("train.seed".into(), seed.into()));
            out.push(("sampler.seed".into(), seed.into()));
        }
        Ok(out)
    }

    fn resolve(&self, extra: Vec<(String, Value)>) -> Result<RunConfig> {
        let mut o = self.overrides()?;
        o.extend(extra);
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    MultiChannel,
    SingleChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    SingleChannel,
    RandomMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    MostCorr,
    MostSpatialCorr,
    Krr,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// JSON synthetic spec (a single spec or a preset object).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a denoiser on the train split of a dataset directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "multi-channel")]
        mode: TrainMode,
        /// Channels that are always missing in single-channel mode
        /// (repeatable or comma-separated).
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Impute missing channels of every sample in a container.
    Impute {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Missing channels "CH1,CH4", or "@p=0.5" for a random mask per sample.
        #[arg(long)]
        mask: String,
        /// Samples drawn per input.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        overwrite_observed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples without any observed channel.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score imputations on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Channels to score (single-channel protocol); default all.
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        /// Observation probability of the random-mask protocol.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Use only the first N test samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a non-diffusion baseline on the test split.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        data: PathBuf,
        /// Channels to predict; default all.
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every architecture of an ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON list of grid rows; default is the four-row grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare union and intersection training on two datasets.
    Union {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data_a: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { preset, spec, out, seed } => cmd_gen(preset.as_deref(), spec.as_deref(), &out, seed),
        Command::Train { cfg, data, out, mode, target, resume } => {
            cmd_train(&cfg, &data, &out, mode, &target, resume.as_deref())
        }
        Command::Impute { cfg, checkpoint, input, mask, k, steps, overwrite_observed, out } => {
            let mut extra = sampler_flags(k, steps);
            if overwrite_observed {
                extra.push(("sampler.overwrite_observed".into(), true.into()));
            }
            let run = cfg.resolve(extra)?;
            cmd_impute(&run, &checkpoint, &input, &mask, &out)
        }
        Command::Generate { cfg, checkpoint, count, steps, out } => {
            let run = cfg.resolve(sampler_flags(None, steps))?;
            cmd_generate(&run, &checkpoint, count, &out)
        }
        Command::Eval { cfg, checkpoint, data, protocol, target, p, trials, samples, k, steps, out } => {
            let run = cfg.resolve(sampler_flags(k, steps))?;
            cmd_eval(&run, &checkpoint, &data, protocol, &target, p, trials, samples, &out)
        }
        Command::Baseline { cfg, method, data, target, out } => {
            cmd_baseline(&cfg.resolve(Vec::new())?, method, &data, &target, &out)
        }
        Command::Ablate { cfg, grid, data, target, samples, out } => {
            cmd_ablate(&cfg.resolve(Vec::new())?, grid.as_deref(), &data, &target, samples, &out)
        }
        Command::Union { cfg, data_a, data_b, samples, out } => {
            cmd_union(&cfg.resolve(Vec::new())?, &data_a, &data_b, samples, &out)
        }
    }
}

fn sampler_flags(k: Option<usize>, steps: Option<usize>) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    if let Some(k) = k {
        out.push(("sampler.num_samples".into(), k.into()));
    }
    if let Some(s) = steps {
        out.push(("sampler.steps".into(), s.into()));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::disk(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn require_data_dir(dir: &Path) -> Result<()> {
    if !dir.join(MANIFEST_NAME).is_file() {
        return Err(Error::InvalidConfig(format!("{} is not a dataset directory (no {MANIFEST_NAME})", dir.display())));
    }
    Ok(())
}

fn load_spec(path: &Path) -> Result<Preset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::disk(path, e))?;
    if let Ok(p) = serde_json::from_str::<Preset>(&text) {
        return Ok(p);
    }
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| Error::BadSpec(format!("{}: {e}", path.display())))?;
    Ok(Preset::Single { spec })
}

fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    let train = synth::gen_split(spec, Split::Train)?;
    let test = synth::gen_split(spec, Split::Test)?;
    let note = "independent synthetic draws per split; data unnormalized, statistics are computed from the train split at training time";
    write_dataset_dir(dir, &[&train, &test], note)?;
    write_json(&dir.join("spec.json"), spec)
}

pub fn cmd_gen(preset: Option<&str>, spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut p = match (preset, spec) {
        (Some(name), _) => synth::preset(name, seed.unwrap_or(0)).ok_or_else(|| {
            Error::InvalidConfig(format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")))
        })?,
        (None, Some(path)) => load_spec(path)?,
        (None, None) => return Err(Error::InvalidConfig("either --preset or --spec is required".into())),
    };
    if let (Some(s), None) = (seed, preset) {
        match &mut p {
            Preset::Single { spec } => spec.seed = s,
            Preset::Pair { a, b } => {
                a.seed = s;
                b.seed = s.wrapping_add(0x5eed);
            }
        }
    }
    match &p {
        Preset::Single { spec } => write_synth(spec, out)?,
        Preset::Pair { a, b } => {
            write_synth(a, &out.join("a"))?;
            write_synth(b, &out.join("b"))?;
            write_json(&out.join("preset.json"), &p)?;
        }
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn read_train_test(dir: &Path, clip: f64) -> Result<(Dataset, Dataset)> {
    require_data_dir(dir)?;
    let train = normalize_per_channel(&read_split(dir, Split::Train)?, clip)?;
    let test = apply_stats(&read_split(dir, Split::Test)?, train.stats().expect("normalized"))?;
    Ok((train, test))
}

pub fn cmd_train(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    mode: TrainMode,
    targets: &[String],
    resume: Option<&Path>,
) -> Result<()> {
    require_data_dir(data)?;
    let mut run = args.resolve(Vec::new())?;
    let raw = read_split(data, Split::Train)?;
    let train_set = normalize_per_channel(&raw, run.clip_percentile)?;
    match mode {
        TrainMode::SingleChannel => {
            if targets.is_empty() {
                return Err(Error::InvalidConfig("single-channel mode needs --target".into()));
            }
            run.train = fixed_channel_mode(&run.train, targets, train_set.panel())?;
        }
        TrainMode::MultiChannel => {
            if !targets.is_empty() {
                return Err(Error::InvalidConfig("--target is only valid with --mode single-channel".into()));
            }
        }
    }
    run.network = run.network_for(train_set.channels(), train_set.height(), train_set.width());
    run.echo(out, "train", &[("data", data), ("out", out)])?;
    let schedule = run.noise_schedule()?;
    let resume_ck = resume.map(Checkpoint::load).transpose()?;
    let res = train(
        &TrainingSet::new(train_set),
        &run.train,
        &run.network,
        &schedule,
        Some(&TrainOutput { dir: out.to_path_buf() }),
        resume_ck.as_ref(),
    )?;
    log::info!("trained to step {}; checkpoint {:?}", res.state.step, res.checkpoint);
    Ok(())
}

/// Brings `d` onto the checkpoint's normalization.
fn align_stats(d: Dataset, ck: &Checkpoint) -> Result<Dataset> {
    match (d.stats(), ck.header.normalization.as_ref()) {
        (None, Some(s)) => apply_stats(&d, s),
        (Some(a), Some(b)) if a == b => Ok(d),
        (None, None) => Ok(d),
        _ => Err(Error::StatsMismatch),
    }
}

fn check_panel(d: &Dataset, ck: &Checkpoint) -> Result<()> {
    if let Some(p) = &ck.header.panel {
        if p != &**d.panel() {
            return Err(Error::PanelMismatch("data panel differs from the checkpoint's".into()));
        }
    }
    Ok(())
}

/// Parses a mask spec into one mask per input.
pub fn parse_masks(spec: &str, d: &Dataset, seed: u64) -> Result<Vec<ChannelMask>> {
    let c = d.channels();
    if let Some(p) = spec.strip_prefix("@p=") {
        let p: f64 = p.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad mask probability in {spec:?}")))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidConfig(format!("mask probability {p} not in (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok((0..d.len()).map(|_| sample_mask(c, p, &mut rng)).collect());
    }
    let names: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::InvalidConfig("mask spec names no channel".into()));
    }
    let missing = d.panel().indices_of(&names)?;
    let mask = ChannelMask::with_missing(c, &missing);
    mask.validate(c)?;
    Ok(vec![mask; d.len()])
}

pub fn cmd_impute(run: &RunConfig, checkpoint: &Path, input: &Path, mask: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let d = align_stats(read_container(input)?, &ck)?;
    check_panel(&d, &ck)?;
    let masks = parse_masks(mask, &d, run.sampler.seed)?;
    run.echo(out, "impute", &[("checkpoint", checkpoint), ("input", input), ("out", out)])?;
    let net = ck.denoiser()?;
    let inputs: Vec<&MultiChannelSample> = d.samples().iter().collect();
    let samples = impute_samples(&net, &ck.header.schedule, &inputs, &masks, &run.sampler)?;
    let flat: Vec<f32> = samples.into_iter().flatten().flatten().collect();
    let result = Dataset::from_flat(d.panel().clone(), d.height(), d.width(), d.split(), flat)?.with_stats(d.stats().cloned());
    write_container(&result, out.join("imputed.mct"))?;
    let prov = Provenance {
        checkpoint: checkpoint.display().to_string(),
        checkpoint_sha256: file_digest(checkpoint)?,
        input: input.display().to_string(),
        masks: masks.iter().map(|m| m.observed().to_vec()).collect(),
        sampler: run.sampler.clone(),
        samples_per_input: run.sampler.num_samples,
    };
    write_json(&out.join("provenance.json"), &prov)
}

pub fn cmd_generate(run: &RunConfig, checkpoint: &Path, count: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.denoiser()?;
    run.echo(out, "generate", &[("checkpoint", checkpoint), ("out", out)])?;
    let n = net.config();
    let panel = Arc::new(
        ck.header.panel.clone().map(Ok).unwrap_or_else(|| crate::data::ChannelPanel::new((0..n.channels).map(|i| format!("CH{i}"))))?,
    );
    let flat: Vec<f32> = generate_unconditional(&net, &ck.header.schedule, count, &run.sampler)?.into_iter().flatten().collect();
    let d = Dataset::from_flat(panel, n.height, n.width, Split::Test, flat)?.with_stats(ck.header.normalization.clone());
    write_container(&d, out.join("generated.mct"))
}

fn target_indices(d: &Dataset, targets: &[String]) -> Result<Option<Vec<usize>>> {
    if targets.is_empty() {
        Ok(None)
    } else {
        d.panel().indices_of(targets).map(Some)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    run: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    protocol: Protocol,
    targets: &[String],
    p: f64,
    trials: usize,
    samples: Option<usize>,
    out: &Path,
) -> Result<()> {
    require_data_dir(data)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut test = align_stats(read_split(data, Split::Test)?, &ck)?;
    check_panel(&test, &ck)?;
    if let Some(n) = samples {
        test = test.truncated(n);
    }
    run.echo(out, "eval", &[("checkpoint", checkpoint), ("data", data), ("out", out)])?;
    let net = ck.denoiser()?;
    let schedule = &ck.header.schedule;
    let report = match protocol {
        Protocol::SingleChannel => {
            let idx = target_indices(&test, targets)?;
            eval_single_channel(&net, schedule, &test, &run.sampler, idx.as_deref(), None)?
        }
        Protocol::RandomMask => eval_random_mask(&net, schedule, &test, p, trials, &run.sampler)?,
    };
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("report.json"), &(report.to_json()? + "\n"))
}

pub fn cmd_baseline(run: &RunConfig, method: BaselineMethod, data: &Path, targets: &[String], out: &Path) -> Result<()> {
    let (train_set, test) = read_train_test(data, run.clip_percentile)?;
    let names: Vec<String> = if targets.is_empty() { train_set.panel().names().to_vec() } else { targets.to_vec() };
    train_set.panel().indices_of(&names)?;
    run.echo(out, "baseline", &[("data", data), ("out", out)])?;
    let results: Vec<BaselineResult> = names
        .iter()
        .map(|t| match method {
            BaselineMethod::MostCorr => baseline_most_correlated(&train_set, &test, t, false),
            BaselineMethod::MostSpatialCorr => baseline_most_correlated(&train_set, &test, t, true),
            BaselineMethod::Krr => baseline_krr(&train_set, &test, t, &run.krr),
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("method,target,source,r,degenerate\n");
    for r in &results {
        csv.push_str(&format!("{},{},{},{},{}\n", r.method, r.target, r.source.as_deref().unwrap_or(""), r.r, r.degenerate));
    }
    write_text(&out.join("baseline.csv"), &csv)?;
    write_json(&out.join("baseline.json"), &results)
}

pub fn cmd_ablate(
    run: &RunConfig,
    grid: Option<&Path>,
    data: &Path,
    targets: &[String],
    samples: Option<usize>,
    out: &Path,
) -> Result<()> {
    let rows: Vec<AblationRow> = match grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::disk(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => default_grid(),
    };
    let (train_set, mut test) = read_train_test(data, run.clip_percentile)?;
    if let Some(n) = samples {
        test = test.truncated(n);
    }
    let idx = target_indices(&test, targets)?;
    run.echo(out, "ablate", &[("data", data), ("out", out)])?;
    let exp = run.experiment(train_set.channels(), train_set.height(), train_set.width())?;
    let results = run_ablation(&train_set, &test, &exp, &rows, idx.as_deref())?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&results))?;
    write_json(&out.join("ablation.json"), &results)
}

pub fn cmd_union(run: &RunConfig, a: &Path, b: &Path, samples: Option<usize>, out: &Path) -> Result<()> {
    for d in [a, b] {
        require_data_dir(d)?;
    }
    let ma = read_manifest(a)?;
    let mb = read_manifest(b)?;
    if (ma.height, ma.width) != (mb.height, mb.width) {
        return Err(Error::DimMismatch("the two datasets differ in image size".into()));
    }
    let cut = |d: Dataset| match samples {
        Some(n) => d.truncated(n),
        None => d,
    };
    let a_test = cut(read_split(a, Split::Test)?);
    let b_test = cut(read_split(b, Split::Test)?);
    run.echo(out, "union", &[("data_a", a), ("data_b", b), ("out", out)])?;
    let exp = run.experiment(0, ma.height, ma.width)?;
    let report = eval_union_intersection(&read_split(a, Split::Train)?, &read_split(b, Split::Train)?, &a_test, &b_test, &exp)?;
    write_text(&out.join("union.csv"), &report.to_csv())?;
    write_json(&out.join("union.json"), &report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_round_trip() {
        let flat = flatten(&RunConfig::default()).unwrap();
        assert!(flat.contains_key("train.lr"));
        assert!(flat.contains_key("network.width_mults"));
        let overrides: Vec<(String, Value)> = flat.clone().into_iter().collect();
        assert_eq!(RunConfig::load(None, &overrides).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train.lr": 0.001, "network.unet_attention": "se"}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            set: vec!["train.lr=0.003".into(), "schedule.kind=linear".into()],
            seed: Some(9),
        };
        let run = args.resolve(Vec::new()).unwrap();
        assert_eq!(run.train.lr, 0.003);
        assert_eq!(run.network.unet_attention, crate::network::UnetAttention::Se);
        assert_eq!(run.schedule.kind, ScheduleKind::Linear);
        assert_eq!((run.train.seed, run.sampler.seed), (9, 9));

        let sets = |v: &[&str]| ConfigArgs { config: None, set: v.iter().map(|s| s.to_string()).collect(), seed: None };
        let run = sets(&["sampler.clip_x0=[-1, 2]", "train.lr_schedule=cosine"]).resolve(Vec::new()).unwrap();
        assert_eq!(run.sampler.clip_x0, Some((-1.0, 2.0)));
        assert_eq!(run.train.lr_schedule, crate::training::LrSchedule::Cosine);
        let run = sets(&["sampler.clip_x0=null"]).resolve(Vec::new()).unwrap();
        assert_eq!(run.sampler.clip_x0, None);
        let again = sets(&["sampler.clip_x0=[0, 1]"]).resolve(Vec::new()).unwrap();
        assert_eq!(again.sampler.clip_x0, Some((0.0, 1.0)));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let bad = [("train.nope".to_string(), Value::from(1)), ("train".to_string(), Value::from(1))];
        for o in bad {
            let e = RunConfig::load(None, &[o]).unwrap_err();
            assert_eq!(exit_code(&e), EXIT_USAGE);
        }
        let e = RunConfig::load(None, &[("train.steps".into(), Value::from("many"))]).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
    }

    #[test]
    fn mask_specs() {
        let panel = Arc::new(crate::data::ChannelPanel::new(["A", "B", "C"]).unwrap());
        let d = Dataset::from_flat(panel, 1, 1, Split::Test, vec![0.0; 12]).unwrap();
        let m = parse_masks("A, C", &d, 0).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m[0].missing_indices(), vec![0, 2]);
        assert!(matches!(parse_masks("A,Z", &d, 0), Err(Error::UnknownChannel(_))));
        assert!(matches!(parse_masks("A,B,C", &d, 0), Err(Error::EmptyObservedSet)));
        let r = parse_masks("@p=0.5", &d, 3).unwrap();
        assert_eq!(r, parse_masks("@p=0.5", &d, 3).unwrap());
        assert!(r.iter().all(|m| m.observed_count() >= 1));
        assert!(parse_masks("@p=2", &d, 0).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 1, timesteps: vec![], loss: f64::NAN }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::disk("x", std::io::Error::other("boom"))), EXIT_IO);
        assert_eq!(exit_code(&Error::UnknownChannel("x".into())), EXIT_USAGE);
    }
}
