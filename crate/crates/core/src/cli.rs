//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or other runtime failure, 2 invalid config or
//! usage, 3 divergence, 4 perturbation study could not run, 5 theory check
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{params_hash, unix_now, RunConfig, RunManifest};
use crate::env::{perturbation_study, PerturbationReport};
use crate::error::Error;
use crate::metrics::{comparison_table, MetricsWriter};
use crate::policy::{read_params, write_params, PolicyParams};
use crate::synthesis::Mode;
use crate::theory::{run_suite, Freezing, SuiteOptions};
use crate::trainer::{evaluate, train_with, window_mean, EvalReport, MetricsRecord, TrainOutcome};

pub const OUT_ROOT_ENV: &str = "ERPO_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "erpo", version, about = "Token-level advantage synthesis on a synthetic pivot-chain task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy and write metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Train GRPO and ERPO with identical seeds and join their metrics.
    Compare(TrainArgs),
    /// Perturb high- and low-entropy tokens of correct responses.
    Perturb(PerturbArgs),
    /// Run the theory check suite.
    Check(CheckArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

/// Config file plus the overrides shared by every command that builds a run.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key-value config file (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub sigma_target: Option<f64>,
    #[arg(long)]
    pub beta_progress: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        apply!(mode => mode, seed => seed, eta => eta, gamma => gamma, buckets => buckets,
            sigma_target => sigma_target, beta_progress => beta_progress, iterations => iterations,
            learning_rate => learning_rate, length_penalty => env_length_penalty);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; defaults to a directory under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Smoothing factor of the comparison table's EMA columns.
    #[arg(long)]
    pub ema_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to study.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub top_frac: f64,
    /// Number of sampled responses.
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    /// Minimum sampled accuracy for the study to run.
    #[arg(long, default_value_t = 0.5)]
    pub min_accuracy: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Random instances for the gradient and causality checks.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Random groups for the zero-sum check.
    #[arg(long, default_value_t = 1000)]
    pub groups: usize,
    /// Test hook: freeze the potential without its bucket statistics.
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Samples per prompt for pass@k.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
}

/// Failure of a command, carrying the exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::InsufficientCorrect { .. } => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir(out: &Option<PathBuf>, name: String) -> PathBuf {
    out.clone().unwrap_or_else(|| out_root().join(name))
}

fn load_checkpoint(path: &Path) -> Result<PolicyParams, Failure> {
    let file = std::fs::File::open(path)
        .map_err(|e| Failure { code: 2, message: format!("cannot open checkpoint {}: {e}", path.display()) })?;
    read_params(std::io::BufReader::new(file)).map_err(|e| Failure { code: 2, message: e.to_string() })
}

/// Trains one run into `dir`, streaming metrics and checkpoints.
fn train_into(config: &RunConfig, dir: &Path) -> Result<TrainOutcome, Failure> {
    std::fs::create_dir_all(dir)?;
    let started = unix_now();
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    let mut writer = MetricsWriter::create(dir)?;
    let every = config.checkpoint_every;
    let ckpt_dir = dir.join("checkpoints");
    let outcome = train_with(&config.train_config(), |record, params| {
        writer.append(record)?;
        if every > 0 && (record.step + 1) % every == 0 {
            std::fs::create_dir_all(&ckpt_dir)?;
            std::fs::write(ckpt_dir.join(format!("step_{:06}.txt", record.step + 1)), write_params(params))?;
        }
        Ok(())
    })?;
    std::fs::write(dir.join("params.txt"), write_params(&outcome.params))?;
    let manifest = RunManifest {
        config: config.clone(),
        params_hash: params_hash(&outcome.params),
        out_dir: dir.display().to_string(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    std::fs::write(dir.join("manifest.toml"), manifest.render())?;
    Ok(outcome)
}

fn summary(mode: Mode, metrics: &[MetricsRecord]) -> String {
    let w = (metrics.len() / 10).max(1);
    format!(
        "{mode}: steps={} final_window={w} reward={:.4} entropy={:.4} accuracy={:.4} length={:.3}",
        metrics.len(),
        window_mean(metrics, w, |m| m.mean_reward),
        window_mean(metrics, w, |m| m.mean_entropy),
        window_mean(metrics, w, |m| m.accuracy),
        window_mean(metrics, w, |m| m.mean_length),
    )
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let config = args.config.resolve()?;
    let dir = run_dir(&args.out, format!("train-{}-seed{}", config.mode, config.seed));
    let outcome = train_into(&config, &dir)?;
    println!("{}", summary(config.mode, &outcome.metrics));
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_compare(args: &TrainArgs) -> CmdResult {
    let mut config = args.config.resolve()?;
    if let Some(a) = args.ema_alpha {
        config.ema_alpha = a;
        config.validate()?;
    }
    let dir = run_dir(&args.out, format!("compare-seed{}", config.seed));
    let mut runs = Vec::new();
    for mode in [Mode::Grpo, Mode::Erpo] {
        let c = RunConfig { mode, ..config.clone() };
        runs.push(train_into(&c, &dir.join(mode.to_string()))?.metrics);
        println!("{}", summary(mode, &runs[runs.len() - 1]));
    }
    std::fs::write(dir.join("compare.csv"), comparison_table(&runs[0], &runs[1], Some(config.ema_alpha)))?;
    println!("comparison table: {}", dir.join("compare.csv").display());
    Ok(())
}

fn cmd_perturb(args: &PerturbArgs) -> CmdResult {
    let config = args.config.resolve()?;
    let spec = config.env_config().build()?;
    let params = load_checkpoint(&args.checkpoint)?;
    if params.layout != spec.feature_layout() {
        return Err(Failure { code: 2, message: "checkpoint layout does not match the environment".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = perturbation_study(&params, &spec, args.trials, args.top_frac, args.min_accuracy, &mut rng)?;
    print_perturbation(&report);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("perturb.csv"), format!("{}\n{}\n", PerturbationReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(())
}

fn print_perturbation(r: &PerturbationReport) {
    println!("samples={} perturbed_fraction={}", r.samples, r.perturbed_fraction);
    println!("baseline_accuracy={:.4}", r.baseline_accuracy);
    println!("high_entropy_accuracy={:.4} drop={:.4}", r.high_entropy_accuracy, r.high_entropy_drop());
    println!("low_entropy_accuracy={:.4} drop={:.4}", r.low_entropy_accuracy, r.low_entropy_drop());
    println!("gap={:.4}", r.high_entropy_drop() - r.low_entropy_drop());
}

fn cmd_check(args: &CheckArgs) -> CmdResult {
    let config = args.config.resolve()?;
    let mut hyper = config.train_config().hyper;
    hyper.kl_coeff = 0.0;
    let options = SuiteOptions {
        trials: args.trials,
        zero_sum_groups: args.groups,
        hyper,
        freezing: if args.inject_bug { Freezing::IgnoreBuckets } else { Freezing::Exact },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = run_suite(&options, &mut rng)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passes() {
        Ok(())
    } else {
        Err(Failure { code: 5, message: "theory check failed".into() })
    }
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let config = args.config.resolve()?;
    let spec = config.env_config().build()?;
    let params = load_checkpoint(&args.checkpoint)?;
    if params.layout != spec.feature_layout() {
        return Err(Failure { code: 2, message: "checkpoint layout does not match the environment".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = evaluate(&params, &spec, args.trials, args.k, &mut rng)?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Check(a) => cmd_check(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(f) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {}", f.message);
            std::process::ExitCode::from(f.code)
        }
    }
}
