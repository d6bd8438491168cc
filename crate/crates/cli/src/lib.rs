//! Command-line driver: training, evaluation, gradient verification,
//! ablation grids and dataset statistics from one TOML run file.

pub mod ablation;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use adamct::tensor::OpKind;
use adamct::Result;
use clap::{Args, Parser, Subcommand};

use crate::ablation::GridKind;
use crate::commands::exit_code;
use crate::config::{load_config, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "adamct", version, about = "Adaptive mixture of CNN and Transformer sequential recommender")]
pub struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs every parallel section on a single worker thread.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, keep the best validation epoch, and report test metrics.
    Train(Common),
    /// Evaluate a checkpoint on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupts the backward rule of one operation kind.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// mixture | seatt | components; defaults to `ablate.grid`.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated seeds; defaults to `ablate.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print dataset statistics.
    Stats(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Stats(c) => c,
            Command::Evaluate { common, .. } | Command::Gradcheck { common, .. } | Command::Ablate { common, .. } => {
                common
            }
        }
    }
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.deterministic |= common.deterministic;
    if cfg.deterministic {
        // Fails harmlessly if a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Ok(cfg)
}

fn execute(command: &Command) -> Result<i32> {
    let cfg = prepare(command.common())?;
    match command {
        Command::Train(_) => commands::cmd_train(&cfg).map(|_| 0),
        Command::Evaluate { checkpoint, split, .. } => commands::cmd_evaluate(&cfg, checkpoint, split).map(|_| 0),
        Command::Gradcheck { inject_fault, .. } => {
            let fault = inject_fault.as_deref().map(str::parse::<OpKind>).transpose()?;
            let report = commands::cmd_gradcheck(&cfg, fault)?;
            if report.passed() {
                Ok(0)
            } else {
                let groups: Vec<&str> = report.failing().iter().map(|g| g.group.as_str()).collect();
                let worst = report.worst_tensor().map_or("-", |t| t.name.as_str());
                eprintln!(
                    "gradient check failed (tolerance {:e}): groups {}; worst tensor {worst}",
                    report.tolerance,
                    groups.join(", ")
                );
                Ok(1)
            }
        }
        Command::Ablate { grid, seeds, .. } => {
            let grid = grid.as_deref().map(str::parse::<GridKind>).transpose()?.unwrap_or(cfg.ablate.grid);
            let seeds = seeds.clone().unwrap_or_else(|| cfg.ablate.seeds.clone());
            let report = commands::cmd_ablate(&cfg, grid, &seeds)?;
            if report.any_failed() {
                eprintln!("some ablation cells failed");
                Ok(1)
            } else {
                Ok(0)
            }
        }
        Command::Stats(_) => commands::cmd_stats(&cfg).map(|_| 0),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

