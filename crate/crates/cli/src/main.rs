//! `ddco`: generate demonstrations, train flat and hierarchical policies,
//! select the number of options, segment data and evaluate rollouts.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;

use ddco::env::{self, ActionMode, DemoConfig, PushConfig, SldsConfig};
use ddco::inference::dataset_logliks;
use ddco::io::{self, Policy};
use ddco::modelselect::{self, DEFAULT_FOLDS};
use ddco::training::{self, Batch, Init, OptimizerConfig, OptimizerKind, Schedule, TrainConfig, TrainLog};
use ddco::{annotate_segments, Architecture, Dataset, HeadMode};

#[derive(Parser)]
#[command(name = "ddco", version, about = "Discover options from demonstrations")]
struct Cli {
    /// Worker threads for parallel inference and training jobs.
    #[arg(long, global = true, env = "DDCO_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a demonstration dataset (and labels for slds).
    GenDemos(GenDemosArgs),
    /// Fit a flat policy by behavior cloning.
    TrainBc(TrainBcArgs),
    /// Fit a hierarchical policy with Expectation-Gradient.
    TrainDdco(TrainDdcoArgs),
    /// Cross-validate the number of options.
    Crossval(CrossvalArgs),
    /// Label every step with its most likely option.
    Segment(SegmentArgs),
    /// Run a policy in the pushing task.
    Rollout(RolloutArgs),
    /// Compare initialization and schedule regimes across seeds.
    Stability(StabilityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Push,
    Slds,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadKind {
    Cat,
    Hybrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Random,
    Vq,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Joint,
    Layerwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerName {
    Adam,
    Momentum,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchKind {
    Trajectory,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeKind {
    Stochastic,
    Mean,
}

#[derive(Args)]
struct GenDemosArgs {
    #[arg(long, value_enum)]
    env: EnvKind,
    /// Number of supervisor rollouts (push) or trajectories (slds).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Label sidecar path for slds; defaults to `<out>.labels.jsonl`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    slds_k: usize,
    /// Dynamics noise (slds) or execution noise on supervisor controls (push).
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Steps per slds trajectory.
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Goal episodes recorded per push rollout; the whole episode by default.
    #[arg(long)]
    goals_per_demo: Option<usize>,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerName,
    /// Momentum coefficient for `--optimizer momentum`.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, value_enum, default_value = "trajectory")]
    batch: BatchKind,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptimArgs {
    fn optimizer(&self) -> OptimizerConfig {
        let kind = match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Momentum => OptimizerKind::Momentum {
                coefficient: self.momentum,
            },
            OptimizerName::Sgd => OptimizerKind::Sgd,
        };
        OptimizerConfig {
            kind,
            learning_rate: self.lr,
        }
    }
}

#[derive(Args)]
struct TrainBcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: ArchKind,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DdcoArgs {
    #[arg(long, value_enum, default_value = "cat")]
    head: HeadKind,
    #[arg(long, value_enum, default_value = "random")]
    init: InitKind,
    #[arg(long, value_enum, default_value = "joint")]
    schedule: ScheduleKind,
    /// Keep training options in the second layer-wise phase.
    #[arg(long)]
    finetune_options: bool,
    #[arg(long, value_enum, default_value = "mlp")]
    option_arch: ArchKind,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, value_enum, default_value = "linear")]
    high_arch: ArchKind,
    #[arg(long, value_enum, default_value = "linear")]
    termination_arch: ArchKind,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct TrainDdcoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    ddco: DdcoArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    k_list: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[command(flatten)]
    ddco: DdcoArgs,
    /// Summary CSV: k, mean, stderr, selected.
    #[arg(long)]
    out: PathBuf,
    /// Per-fold CSV; defaults to `<out>.folds.csv`.
    #[arg(long)]
    folds_out: Option<PathBuf>,
    /// Checkpoint of the final policy trained on all data with the selected k.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Label file, one line per trajectory.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-trajectory log-likelihood CSV.
    #[arg(long)]
    loglik: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "push")]
    env: EnvKind,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, value_enum, default_value = "stochastic")]
    mode: ModeKind,
    /// Per-episode CSV: episode, seed, reward, toppled, steps, hc_fraction.
    #[arg(long)]
    out: PathBuf,
    /// Step trace of the first episode.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Number of seeds; runs use seeds 0..N.
    #[arg(long)]
    seeds: usize,
    #[command(flatten)]
    ddco: DdcoArgs,
    #[arg(long)]
    out: PathBuf,
}

fn arch(kind: ArchKind, hidden: usize) -> Architecture {
    match kind {
        ArchKind::Linear => Architecture::Linear,
        ArchKind::Mlp => Architecture::Mlp { hidden },
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn train_config(k: usize, args: &DdcoArgs) -> TrainConfig {
    let head_mode = match args.head {
        HeadKind::Cat => HeadMode::Categorical,
        HeadKind::Hybrid => HeadMode::Hybrid,
    };
    if head_mode == HeadMode::Categorical && k == 0 {
        usage_error("--k 0 requires --head hybrid; the categorical head needs at least one option");
    }
    let o = &args.optim;
    TrainConfig {
        k,
        head_mode,
        sigma: o.sigma,
        epochs: o.epochs,
        batch: match o.batch {
            BatchKind::Trajectory => Batch::PerTrajectory,
            BatchKind::Full => Batch::Full,
        },
        seed: o.seed,
        dropout: o.dropout,
        init: match args.init {
            InitKind::Random => Init::Random,
            InitKind::Vq => Init::Vq,
        },
        schedule: match args.schedule {
            ScheduleKind::Joint => Schedule::Joint,
            ScheduleKind::Layerwise => Schedule::Layerwise,
        },
        finetune_options: args.finetune_options,
        optimizer: o.optimizer(),
        high_arch: arch(args.high_arch, args.hidden),
        option_arch: arch(args.option_arch, args.hidden),
        termination_arch: arch(args.termination_arch, args.hidden),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load(path: &Path) -> Result<Dataset> {
    io::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    log.write_csv(path)?;
    info!("training log written to {}", path.display());
    Ok(())
}

fn gen_demos(a: &GenDemosArgs) -> Result<()> {
    if a.n == 0 {
        usage_error("--n must be at least 1");
    }
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        usage_error("--noise must be a non-negative number");
    }
    match a.env {
        EnvKind::Push => {
            let defaults = DemoConfig::default();
            let cfg = DemoConfig {
                goals_per_demo: a.goals_per_demo.unwrap_or(defaults.goals_per_demo),
                execution_noise: a.noise,
                ..defaults
            };
            let data = env::generate_demos(a.n, a.seed, &cfg)?;
            io::save_dataset(&a.out, &data)?;
            info!("{} trajectories, {} steps", data.len(), data.total_steps());
        }
        EnvKind::Slds => {
            let cfg = SldsConfig::new(a.slds_k, a.noise, a.horizon);
            let (data, labels) = env::slds_generate(&cfg, a.n, a.seed)?;
            io::save_dataset(&a.out, &data)?;
            let label_path = a.labels.clone().unwrap_or_else(|| with_suffix(&a.out, ".labels.jsonl"));
            io::save_labels(&label_path, &labels)?;
        }
    }
    Ok(())
}

fn train_bc(a: &TrainBcArgs) -> Result<()> {
    let data = load(&a.data)?;
    let o = &a.optim;
    let cfg = TrainConfig {
        sigma: o.sigma,
        epochs: o.epochs,
        batch: match o.batch {
            BatchKind::Trajectory => Batch::PerTrajectory,
            BatchKind::Full => Batch::Full,
        },
        seed: o.seed,
        dropout: o.dropout,
        optimizer: o.optimizer(),
        ..TrainConfig::default()
    };
    let (policy, log) = training::bc_train(&data, arch(a.arch, a.hidden), &cfg)?;
    io::save_checkpoint(&Policy::Flat(policy), &a.out)?;
    write_log(&log, &a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv")))
}

fn train_ddco(a: &TrainDdcoArgs) -> Result<()> {
    let cfg = train_config(a.k, &a.ddco);
    let data = load(&a.data)?;
    let (policy, log) = training::ddco_train(&data, &cfg)?;
    io::save_checkpoint(&Policy::Hierarchical(policy), &a.out)?;
    write_log(&log, &a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv")))
}

fn crossval(a: &CrossvalArgs) -> Result<()> {
    if a.folds < 2 {
        usage_error("--folds must be at least 2");
    }
    for &k in &a.k_list {
        train_config(k, &a.ddco);
    }
    let data = load(&a.data)?;
    let cfg = train_config(a.k_list[0], &a.ddco);
    let report = modelselect::cross_validate_k(&data, &a.k_list, &cfg, a.folds)?;
    report.write_summary_csv(File::create(&a.out).with_context(|| a.out.display().to_string())?)?;
    let folds_out = a.folds_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".folds.csv"));
    report.write_folds_csv(File::create(&folds_out).with_context(|| folds_out.display().to_string())?)?;
    if let Some(model) = &a.model {
        io::save_checkpoint(&Policy::Hierarchical(report.policy.clone()), model)?;
    }
    info!("selected k = {}", report.selected_k);
    Ok(())
}

fn segment(a: &SegmentArgs) -> Result<()> {
    let data = load(&a.data)?;
    let policy = io::load_hierarchical(&a.model)?;
    let labels = data
        .trajectories()
        .iter()
        .map(|t| annotate_segments(&policy, t))
        .collect::<ddco::Result<Vec<_>>>()?;
    io::save_labels(&a.out, &labels)?;
    if let Some(path) = &a.loglik {
        io::write_logliks_csv(path, &data, &dataset_logliks(&policy, &data)?)?;
    }
    Ok(())
}

fn rollout(a: &RolloutArgs) -> Result<()> {
    if a.episodes == 0 {
        usage_error("--episodes must be at least 1");
    }
    if let EnvKind::Slds = a.env {
        usage_error("rollouts are only available for --env push");
    }
    let policy = io::load_checkpoint(&a.model)?;
    let cfg = PushConfig::default();
    let mode = match a.mode {
        ModeKind::Stochastic => ActionMode::Stochastic,
        ModeKind::Mean => ActionMode::Mean,
    };
    let file = File::create(&a.out).with_context(|| a.out.display().to_string())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["episode", "seed", "reward", "toppled", "steps", "hc_fraction"])?;
    let mut total = 0.0;
    for ep in 0..a.episodes {
        let seed = a.seed.wrapping_add(ep as u64);
        let want_trace = ep == 0 && a.trace.is_some();
        let r = env::rollout(&policy, &cfg, a.horizon, seed, mode, want_trace)?;
        if let (true, Some(path)) = (want_trace, &a.trace) {
            r.save_trace(path)?;
        }
        total += r.reward as f64;
        w.write_record([
            ep.to_string(),
            seed.to_string(),
            r.reward.to_string(),
            u8::from(r.toppled).to_string(),
            r.steps.to_string(),
            r.hc_fraction().to_string(),
        ])?;
    }
    w.flush()?;
    info!("mean reward {:.3}", total / a.episodes as f64);
    Ok(())
}

fn stability(a: &StabilityArgs) -> Result<()> {
    if a.seeds < 2 {
        usage_error("--seeds must be at least 2");
    }
    let cfg = train_config(a.k, &a.ddco);
    let data = load(&a.data)?;
    let report = modelselect::stability_report(&data, a.k, a.seeds, &cfg)?;
    report.save_csv(&a.out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            usage_error("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::TrainBc(a) => train_bc(a),
        Command::TrainDdco(a) => train_ddco(a),
        Command::Crossval(a) => crossval(a),
        Command::Segment(a) => segment(a),
        Command::Rollout(a) => rollout(a),
        Command::Stability(a) => stability(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
