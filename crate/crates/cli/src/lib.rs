//! `coanno`: dataset synthesis, assistant training, simulated annotation
//! benchmarks, evaluation, curve export, and the annotation server.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::Config;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "coanno", version, about = "Collaborative panoptic annotation toolkit")]
pub struct Cli {
    /// TOML experiment file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step (sampling, training, evaluation; the
    /// world itself under `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for image-level parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic dataset splits.
    Synth(SynthArgs),
    /// Simulate baseline episodes on a training split and write example shards.
    Examples(ExamplesArgs),
    /// Train the relabel and add ensembles.
    TrainContext(TrainContextArgs),
    /// Train the initialization assistant with hard-negative mining.
    TrainIa(TrainIaArgs),
    /// Run simulated annotation episodes.
    Simulate(SimulateArgs),
    /// Context accuracy by fixed-set size and effort summaries of runs.
    Eval(EvalArgs),
    /// Collect mean curves of several runs into CSV and plot data.
    ExportCurve(ExportArgs),
    /// Serve the session API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// train, val, test, or all.
    #[arg(long, default_value = "all")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ExamplesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainContextArgs {
    /// Training split; used when no shards are given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Glob of example shards to fit on (repeatable).
    #[arg(long)]
    pub shards: Vec<String>,
    /// Glob of example shards for early stopping (repeatable).
    #[arg(long)]
    pub tune_shards: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainIaArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Glob of episode-log files written by `examples`; simulated afresh
    /// when absent.
    #[arg(long)]
    pub logs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Context assistant checkpoint directory.
    #[arg(long)]
    pub ca: Option<PathBuf>,
    /// Initialization assistant checkpoint directory or file.
    #[arg(long)]
    pub ia: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub max_adds: Option<usize>,
    #[arg(long)]
    pub no_ia: bool,
    #[arg(long)]
    pub no_ca_add: bool,
    #[arg(long)]
    pub no_ca_relabel: bool,
    /// Name recorded in the summary; derived from the flags by default.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ca: Option<PathBuf>,
    /// Simulation output to summarize, as NAME=DIR (repeatable).
    #[arg(long)]
    pub run: Vec<String>,
    /// PQ levels for actions-to-reach columns (repeatable).
    #[arg(long)]
    pub target: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Simulation output, as NAME=DIR (repeatable, order kept).
    #[arg(long, required = true)]
    pub run: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ca: Option<PathBuf>,
    #[arg(long)]
    pub ia: Option<PathBuf>,
    /// Directory for session logs; sessions are kept in memory without it.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    /// Directory of display images named `<image_id>.<ext>`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
}

/// Resolves the config and runs one subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    commands::with_jobs(cli.jobs, || commands::dispatch(&cli, cfg))
}
