//! Command-line front end for the whole pipeline.
//!
//! Every subcommand writes its artifacts plus `<subcommand>.manifest.json`
//! into `--out`. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::container::sha256_hex;
use crate::diffusion::{
    train_denoiser, Denoiser, DenoiserConfig, DenoiserTrainConfig, ScheduleConfig,
};
use crate::guided_sampler::{
    batch_sample, BatchOptions, GuidanceConfig, GuidanceMode, StepSchedule, StreamKey,
};
use crate::metrics::{
    condition_features, evaluate, motion_features, FeatureSet, FeatureSource, MetricsConfig,
};
use crate::retrieval::{build_index, retrieval_eval, RetrievalIndex};
use crate::reward::{train_reward_model, RewardConfig, RewardModel, RewardTrainConfig, StepToken};
use crate::synthdata::{build_splits, load_dataset, Condition, Dataset, Pair, Split};
use crate::verify_analytic::{
    run_analytic_check, AnalyticCheckConfig, GaussianSpec, QuadraticReward,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "reguide",
    version,
    about = "Reward-guided diffusion sampling on synthetic trajectories"
)]
pub struct Cli {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Global seed; all randomness derives from it.
    #[arg(long, global = true, env = "REGUIDE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sampling and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test datasets.
    GenData(GenDataArgs),
    /// Train the noise-prediction network.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the step-aware reward model.
    TrainReward(TrainRewardArgs),
    /// Embed a dataset into a retrieval index.
    BuildIndex(BuildIndexArgs),
    /// Reward-guided sampling.
    Sample(SampleArgs),
    /// Closed-form Gaussian check of the guided sampler.
    Verify(VerifyArgs),
    /// Batch retrieval R@k on a test split.
    EvalRetrieval(EvalRetrievalArgs),
    /// R-Precision, FID, MM Dist and diversity of generated samples.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainDenoiser(_) => "train-denoiser",
            Command::TrainReward(_) => "train-reward",
            Command::BuildIndex(_) => "build-index",
            Command::Sample(_) => "sample",
            Command::Verify(_) => "verify",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Training pairs.
    #[arg(long, default_value_t = 800)]
    pub train: usize,
    /// Validation pairs.
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    /// Test pairs.
    #[arg(long, default_value_t = 320)]
    pub test: usize,
    /// Frames per trajectory.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDenoiserArgs {
    /// Training dataset (.rgds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Optimizer steps.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Batch size.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// Probability of dropping the condition for classifier-free training.
    #[arg(long, default_value_t = 0.1)]
    pub p_uncond: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRewardArgs {
    /// Training dataset (.rgds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Validation dataset for the per-epoch contrastive loss.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Fraction of clean samples per batch.
    #[arg(long, default_value_t = 0.5)]
    pub omega: f64,
    /// Condition-embedding cosine at or above which a pair is not a negative.
    #[arg(long, default_value_t = 0.9)]
    pub neg_threshold: f64,
    /// Contrastive temperature.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Training epochs.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Batch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint file stem.
    #[arg(long, default_value = "reward")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildIndexArgs {
    /// Dataset whose motions are indexed.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Reward model checkpoint used for the embeddings.
    #[arg(long)]
    pub reward_ckpt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["cond", "dataset"])))]
pub struct SampleArgs {
    /// Denoiser checkpoint (.rgck).
    #[arg(long)]
    pub denoiser_ckpt: PathBuf,
    /// Reward model checkpoint; required unless guidance is off.
    #[arg(long)]
    pub reward_ckpt: Option<PathBuf>,
    /// Retrieval index; required when --eta is nonzero.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Condition `class:speed,curvature,amplitude`; repeatable.
    #[arg(long)]
    pub cond: Vec<String>,
    /// Take conditions from this dataset instead.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use only the first N dataset conditions.
    #[arg(long)]
    pub count: Option<usize>,
    /// Weight of the text-to-motion reward.
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Weight of the motion-to-motion reward against the retrieved anchor.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", default_value_t = 7.5)]
    pub cfg_scale: f64,
    /// Gradient weighting: theorem3, unweighted or off.
    #[arg(long, default_value = "unweighted", value_parser = parse_mode)]
    pub mode: GuidanceMode,
    /// Sampling steps: a count for a strided plan, or `full`.
    #[arg(long, default_value = "50", value_parser = parse_steps)]
    pub steps: StepSchedule,
    /// Per-step L2 clip on the reward gradient.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Evaluate the reward with the clean-step token instead of the current t.
    #[arg(long)]
    pub clean_token: bool,
    /// Key per-sample RNG streams by condition content instead of position.
    #[arg(long)]
    pub key_by_condition: bool,
    /// Per-step trace file name (JSON lines).
    #[arg(long, default_value = "trace.jsonl")]
    pub trace: String,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Reward strength in R(x) = -lambda (x - target)^2.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Reward target.
    #[arg(long, default_value_t = 2.0)]
    pub target: f64,
    /// Prior mean.
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    /// Prior variance.
    #[arg(long, default_value_t = 1.0)]
    pub var: f64,
    /// Gradient weighting: theorem3, unweighted or off.
    #[arg(long, default_value = "theorem3", value_parser = parse_mode)]
    pub mode: GuidanceMode,
    /// Number of independent chains.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Sampling steps: a count for a strided plan, or `full`.
    #[arg(long, default_value = "full", value_parser = parse_steps)]
    pub steps: StepSchedule,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalRetrievalArgs {
    /// Test dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Reward model checkpoint.
    #[arg(long)]
    pub reward_ckpt: PathBuf,
    /// Noise level applied to motions before encoding (0 keeps them clean).
    #[arg(long, default_value_t = 0)]
    pub noise_t: usize,
    /// Retrieval batch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Real reference dataset.
    #[arg(long)]
    pub real: PathBuf,
    /// Samples file written by `sample`, or the directory holding it.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reward model checkpoint used as the feature extractor.
    #[arg(long)]
    pub reward_ckpt: PathBuf,
    /// R-Precision batch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Random pairs used for the diversity estimate.
    #[arg(long, default_value_t = 300)]
    pub diversity_pairs: usize,
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_steps(s: &str) -> Result<StepSchedule, String> {
    if s == "full" {
        return Ok(StepSchedule::Full);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(StepSchedule::Strided(n)),
        _ => Err(format!(
            "expected a positive step count or `full`, got {s:?}"
        )),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
    #[error("analytic check failed")]
    CheckFailed,
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}

domain_from!(
    std::io::Error,
    serde_json::Error,
    crate::synthdata::SynthError,
    crate::checkpoint::CheckpointError,
    crate::diffusion::DiffusionError,
    crate::reward::RewardError,
    crate::retrieval::RetrievalError,
    crate::guided_sampler::SamplerError,
    crate::verify_analytic::VerifyError,
    crate::metrics::MetricsError
);

#[derive(Debug, Clone, Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

/// Resolved configuration and content hashes of one run. Paths are reduced
/// to file names so manifests compare equal across output directories.
#[derive(Debug, Serialize)]
struct Manifest {
    subcommand: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, Artifact>,
    outputs: BTreeMap<String, Artifact>,
}

struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let bytes =
            fs::read(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
        self.manifest
            .inputs
            .insert(role.into(), artifact(path, &bytes));
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.manifest
            .outputs
            .insert(name.into(), artifact(&path, bytes));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<PathBuf, CliError> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(self) -> Result<(), CliError> {
        let name = format!("{}.manifest.json", self.manifest.subcommand);
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        fs::write(self.out.join(name), s)?;
        Ok(())
    }
}

fn artifact(path: &Path, bytes: &[u8]) -> Artifact {
    Artifact {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(bytes),
    }
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
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out)?;
    let config = match &cli.command {
        Command::GenData(a) => serde_json::to_value(a)?,
        Command::TrainDenoiser(a) => serde_json::to_value(a)?,
        Command::TrainReward(a) => serde_json::to_value(a)?,
        Command::BuildIndex(a) => serde_json::to_value(a)?,
        Command::Sample(a) => serde_json::to_value(a)?,
        Command::Verify(a) => serde_json::to_value(a)?,
        Command::EvalRetrieval(a) => serde_json::to_value(a)?,
        Command::Eval(a) => {
            let mut v = serde_json::to_value(a)?;
            v["generated"] = serde_json::to_value(a.generated_file())?;
            v
        }
    };
    let mut run = Run {
        out: cli.out.clone(),
        manifest: Manifest {
            subcommand: cli.command.name().into(),
            seed: cli.seed,
            config: strip_paths(config),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        },
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&mut run, a, cli.seed),
        Command::TrainDenoiser(a) => train_denoiser_cmd(&mut run, a, cli.seed),
        Command::TrainReward(a) => train_reward_cmd(&mut run, a, cli.seed),
        Command::BuildIndex(a) => build_index_cmd(&mut run, a),
        Command::Sample(a) => sample_cmd(&mut run, a, cli.seed, workers),
        Command::Verify(a) => verify_cmd(&mut run, a, cli.seed),
        Command::EvalRetrieval(a) => eval_retrieval_cmd(&mut run, a, cli.seed),
        Command::Eval(a) => eval_cmd(&mut run, a, cli.seed),
    };
    let check_failed = matches!(result, Err(CliError::CheckFailed));
    if result.is_ok() || check_failed {
        run.finish()?;
    }
    result
}

/// Replaces path-valued config entries by their file names.
fn strip_paths(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => serde_json::Value::Object(
            m.into_iter()
                .map(|(k, v)| {
                    let v = match (&v, k.as_str()) {
                        (
                            serde_json::Value::String(s),
                            "dataset" | "val" | "real" | "generated" | "reward_ckpt"
                            | "denoiser_ckpt" | "index",
                        ) => serde_json::Value::String(
                            Path::new(s)
                                .file_name()
                                .map(|f| f.to_string_lossy().into_owned())
                                .unwrap_or_default(),
                        ),
                        _ => v,
                    };
                    (k, v)
                })
                .collect(),
        ),
        other => other,
    }
}

fn load_data(run: &mut Run, role: &str, path: &Path) -> Result<Dataset, CliError> {
    run.input(role, path)?;
    Ok(load_dataset(path)?)
}

fn load_denoiser(run: &mut Run, path: &Path) -> Result<Denoiser, CliError> {
    run.input("denoiser_ckpt", path)?;
    let (ck, _) = Checkpoint::load(path)?;
    Ok(Denoiser::from_checkpoint(&ck)?)
}

fn load_reward(run: &mut Run, path: &Path) -> Result<(RewardModel, String), CliError> {
    run.input("reward_ckpt", path)?;
    let (ck, hash) = Checkpoint::load(path)?;
    Ok((RewardModel::from_checkpoint(&ck)?, hash))
}

fn gen_data(run: &mut Run, a: &GenDataArgs, seed: u64) -> Result<(), CliError> {
    let s = build_splits(a.train, a.val, a.test, a.frames, seed)?;
    for d in [&s.train, &s.val, &s.test] {
        let name = format!("{}.rgds", d.split.name());
        run.write(&name, &crate::synthdata::encode_dataset(d))?;
        info!("wrote {name} ({} pairs)", d.len());
    }
    Ok(())
}

fn train_denoiser_cmd(run: &mut Run, a: &TrainDenoiserArgs, seed: u64) -> Result<(), CliError> {
    let data = load_data(run, "dataset", &a.dataset)?;
    let config = DenoiserConfig {
        n_frames: data.n_frames,
        dim: data.dim(),
        ..DenoiserConfig::default()
    };
    let cfg = DenoiserTrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        p_uncond: a.p_uncond,
        seed,
        ..DenoiserTrainConfig::default()
    };
    let (model, log) = train_denoiser(&data, config, cfg)?;
    run.write("denoiser.rgck", &model.to_checkpoint().encode())?;
    run.write_json("denoiser_log.json", &log)?;
    Ok(())
}

fn train_reward_cmd(run: &mut Run, a: &TrainRewardArgs, seed: u64) -> Result<(), CliError> {
    let data = load_data(run, "dataset", &a.dataset)?;
    let val = match &a.val {
        Some(p) => Some(load_data(run, "val", p)?),
        None => None,
    };
    let config = RewardConfig {
        n_frames: data.n_frames,
        dim: data.dim(),
        ..RewardConfig::default()
    };
    let cfg = RewardTrainConfig {
        omega: a.omega,
        neg_threshold: a.neg_threshold,
        tau: a.tau,
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed,
        ..RewardTrainConfig::default()
    };
    let (model, log) = train_reward_model(&data, val.as_ref(), config, cfg)?;
    run.write(&format!("{}.rgck", a.name), &model.to_checkpoint().encode())?;
    run.write_json(&format!("{}_log.json", a.name), &log)?;
    Ok(())
}

fn build_index_cmd(run: &mut Run, a: &BuildIndexArgs) -> Result<(), CliError> {
    let data = load_data(run, "dataset", &a.dataset)?;
    let (model, _) = load_reward(run, &a.reward_ckpt)?;
    let index = build_index(&model, &data)?;
    run.write("index.rgix", &index.encode())?;
    Ok(())
}

#[derive(Serialize)]
struct TraceLine {
    sample: usize,
    t: usize,
    reward: f64,
    grad_norm: f64,
}

fn sample_cmd(run: &mut Run, a: &SampleArgs, seed: u64, workers: usize) -> Result<(), CliError> {
    let conds: Vec<Condition> = match &a.dataset {
        Some(p) => {
            let d = load_data(run, "dataset", p)?;
            let mut c = d.conditions();
            if let Some(n) = a.count {
                c.truncate(n);
            }
            c
        }
        None => a
            .cond
            .iter()
            .map(|s| Condition::parse(s))
            .collect::<Result<_, _>>()?,
    };
    if conds.is_empty() {
        return Err(CliError::Usage("no conditions to sample".into()));
    }
    let gcfg = GuidanceConfig {
        mu: a.mu,
        eta: a.eta,
        cfg_scale: a.cfg_scale,
        steps: a.steps.clone(),
        mode: a.mode,
        clip: (!a.no_clip).then_some(a.clip),
        step_token: if a.clean_token {
            StepToken::Clean
        } else {
            StepToken::Current
        },
        record_snapshots: false,
    };
    let denoiser = load_denoiser(run, &a.denoiser_ckpt)?;
    let reward = match (&a.reward_ckpt, gcfg.guided()) {
        (Some(p), true) => Some(load_reward(run, p)?.0),
        (None, true) => {
            return Err(CliError::Usage(
                "guided sampling requires --reward-ckpt".into(),
            ))
        }
        (_, false) => None,
    };
    let index = match (&a.index, gcfg.guided() && gcfg.eta != 0.0) {
        (Some(p), true) => {
            run.input("index", p)?;
            Some(RetrievalIndex::load(p)?)
        }
        (None, true) => {
            return Err(CliError::Usage(
                "--eta other than 0 requires --index".into(),
            ))
        }
        (_, false) => None,
    };
    let sched = denoiser.config().schedule.build()?;
    let opts = BatchOptions {
        seed,
        key: if a.key_by_condition {
            StreamKey::ConditionHash
        } else {
            StreamKey::Position
        },
        workers,
    };
    let results = batch_sample(
        &conds,
        &denoiser,
        reward.as_ref(),
        index.as_ref(),
        &sched,
        &gcfg,
        &opts,
    )?;
    let mut trace = Vec::new();
    for (i, r) in results.iter().enumerate() {
        for rec in &r.trace.records {
            let line = TraceLine {
                sample: i,
                t: rec.t,
                reward: rec.reward,
                grad_norm: rec.grad_norm,
            };
            serde_json::to_writer(&mut trace, &line)?;
            trace.write_all(b"\n")?;
        }
    }
    let samples = Dataset {
        split: Split::Test,
        generator_seed: seed,
        n_frames: denoiser.config().n_frames,
        pairs: results
            .iter()
            .map(|r| Pair {
                condition: r.condition,
                motion: r.motion.clone(),
                seed: r.trace.stream,
            })
            .collect(),
    };
    run.write("samples.rgds", &crate::synthdata::encode_dataset(&samples))?;
    run.write(&a.trace, &trace)?;
    info!("sampled {} motions", results.len());
    Ok(())
}

fn verify_cmd(run: &mut Run, a: &VerifyArgs, seed: u64) -> Result<(), CliError> {
    let spec = GaussianSpec::new(vec![a.mean], vec![a.var])?;
    let reward = QuadraticReward::new(vec![a.target], a.lambda)?;
    let sched = ScheduleConfig::default().build()?;
    let cfg = AnalyticCheckConfig {
        samples: a.samples,
        mode: a.mode,
        steps: a.steps.clone(),
        seed,
    };
    let report = run_analytic_check(&spec, &reward, &sched, &cfg)?;
    let text = report.to_text();
    print!("{text}");
    run.write("verify_report.txt", text.as_bytes())?;
    run.write_json("verify_moments.json", &report)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

fn eval_retrieval_cmd(run: &mut Run, a: &EvalRetrievalArgs, seed: u64) -> Result<(), CliError> {
    let data = load_data(run, "dataset", &a.dataset)?;
    let (model, _) = load_reward(run, &a.reward_ckpt)?;
    let sched = ScheduleConfig {
        steps: model.config().max_t,
        ..ScheduleConfig::default()
    }
    .build()?;
    let report = retrieval_eval(&model, &data, &sched, a.batch, seed, a.noise_t)?;
    for (i, k) in report.ks.iter().enumerate() {
        println!(
            "R@{k:<3} motion->text {:.4}  text->motion {:.4}",
            report.motion_to_text[i], report.text_to_motion[i]
        );
    }
    run.write_json("retrieval.json", &report)?;
    Ok(())
}

impl EvalArgs {
    fn generated_file(&self) -> PathBuf {
        if self.generated.is_dir() {
            self.generated.join("samples.rgds")
        } else {
            self.generated.clone()
        }
    }
}

fn eval_cmd(run: &mut Run, a: &EvalArgs, seed: u64) -> Result<(), CliError> {
    let real = load_data(run, "real", &a.real)?;
    let generated = load_data(run, "generated", &a.generated_file())?;
    let (model, hash) = load_reward(run, &a.reward_ckpt)?;
    let real_feats = motion_features(
        &model,
        &real.pairs.iter().map(|p| &p.motion).collect::<Vec<_>>(),
    )?;
    let gen_feats = motion_features(
        &model,
        &generated
            .pairs
            .iter()
            .map(|p| &p.motion)
            .collect::<Vec<_>>(),
    )?;
    let cond_feats = condition_features(&model, &generated.conditions())?;
    let cfg = MetricsConfig {
        batch: a.batch,
        diversity_pairs: a.diversity_pairs,
        seed,
    };
    let report = evaluate(
        &FeatureSet::new(real_feats, FeatureSource::Real, hash.clone())?,
        &FeatureSet::new(gen_feats, FeatureSource::Generated, hash)?,
        &cond_feats,
        &cfg,
    )?;
    let table = report.to_table();
    print!("{table}");
    run.write("metrics.txt", table.as_bytes())?;
    run.write_json("metrics.json", &report)?;
    Ok(())
}
