//! `qdbn`: train DDBNs, search per-neuron bit-lengths, trace pruning
//! curves and evaluate models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or model file error,
//! 4 infeasible accuracy constraint, 1 anything else.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qdbn::ddbn::ClassifyMode;
use qdbn::Variant;

use config::{RunConfig, Split};
use output::OutputDir;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Infeasible(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Infeasible(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "qdbn", version, about = "Per-neuron bit-length optimization for discriminative deep belief networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// MNIST directory (overrides `data.mnist_dir`).
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full-precision DDBN.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the two-phase bit-length search on a trained model.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Ablation variant (overrides `search.variant`).
        #[arg(long)]
        variant: Option<Variant>,
        /// Maximum relative accuracy loss (overrides the config).
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Accuracy versus number of pruned neurons, criticality and random orders.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy and confusion counts of a model file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Stochastic inference with this many samples instead of mean field.
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(dir) = &common.mnist_dir {
        cfg.data.mnist_dir = dir.clone();
    }
    Ok(cfg)
}

fn finish_config(mut cfg: RunConfig, common: &Common) -> Result<RunConfig, CliError> {
    cfg.apply_seed();
    cfg.validate()?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

/// Prepares the output directory and writes `<command>_config.toml`, the
/// effective configuration after flag overrides.
fn output_dir(cfg: &RunConfig, command: &str) -> Result<OutputDir, CliError> {
    let dir = cfg
        .output_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    let out = OutputDir::prepare(dir)?;
    out.write(&format!("{command}_config.toml"), cfg.to_toml().as_bytes())?;
    Ok(out)
}

fn model_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.model_path.clone())
        .ok_or_else(|| CliError::Config("no input model: pass --model or set model_path".into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = finish_config(load_config(&common)?, &common)?;
            let out = output_dir(&cfg, "train")?;
            commands::train(&cfg, &out)
        }
        Command::Search {
            common,
            model,
            variant,
            epsilon,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.search.variant = v;
            }
            if let Some(e) = epsilon {
                cfg.search.max_relative_accuracy_loss = e;
            }
            let cfg = finish_config(cfg, &common)?;
            let model = model_path(model, &cfg)?;
            let out = output_dir(&cfg, "search")?;
            commands::search(&cfg, &model, &out)
        }
        Command::Curve { common, model } => {
            let cfg = finish_config(load_config(&common)?, &common)?;
            let model = model_path(model, &cfg)?;
            let out = output_dir(&cfg, "curve")?;
            commands::curve(&cfg, &model, &out)
        }
        Command::Eval {
            common,
            model,
            split,
            samples,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if let Some(samples) = samples {
                cfg.eval.mode = ClassifyMode::Stochastic {
                    samples,
                    seed: cfg.seed.unwrap_or(0),
                };
            }
            let cfg = finish_config(cfg, &common)?;
            let model = model_path(model, &cfg)?;
            let out = match cfg.output_dir {
                Some(_) => Some(output_dir(&cfg, "eval")?),
                None => None,
            };
            commands::eval(&cfg, &model, out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
