//! Command-line driver for the `loract` library.
//!
//! Each subcommand builds a [`report::Report`] of deterministic data tables
//! plus pass/fail checks, then writes it as CSV and/or JSON.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{Format, RunConfig};
use crate::report::Report;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Linalg(#[from] loract::linalg::LinalgError),
    #[error(transparent)]
    Compress(#[from] loract::compress::CompressError),
    #[error(transparent)]
    Autodiff(#[from] loract::autodiff::AutodiffError),
    #[error(transparent)]
    Transformer(#[from] loract::transformer::TransformerError),
    #[error(transparent)]
    Bounds(#[from] loract::bounds::BoundsError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Parser)]
#[command(name = "loract", version, about = "Low-rank activation compression experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compare the four decompositions over a grid of ranks.
    Decompose(DecomposeArgs),
    /// Singular spectrum and kept-ratio sweep of a matrix.
    Spectrum(SpectrumArgs),
    /// Finite-difference and model-level gradient checks.
    Gradcheck(GradcheckArgs),
    /// Toy adapter fine-tuning over a sweep of compression ratios.
    Train(TrainArgs),
    /// Numerical checks of the approximation and accumulation bounds.
    Bounds(BoundsArgs),
    /// Activation memory against batch size and sequence length.
    Memsweep(MemsweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Decompose(_) => "decompose",
            Command::Spectrum(_) => "spectrum",
            Command::Gradcheck(_) => "gradcheck",
            Command::Train(_) => "train",
            Command::Bounds(_) => "bounds",
            Command::Memsweep(_) => "memsweep",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DecomposeArgs {
    /// Ranks to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Sample count for the randomized methods; defaults to `k + oversample`.
    #[arg(long)]
    pub l: Option<usize>,
    /// Power iterations.
    #[arg(long)]
    pub t: Option<usize>,
    /// Restrict to one method (tsvd, rsvd, sampled, randproj).
    #[arg(long)]
    pub method: Option<loract::decompose::MethodKind>,
    /// Matrix fixture, overriding the configured generator.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    /// Also report gradient error against exact storage at these ratios.
    #[arg(long, value_delimiter = ',')]
    pub ratio: Option<Vec<f64>>,
    /// Self-test hook: corrupts the normalization backward.
    #[arg(long, hide = true)]
    pub flip_norm_correction: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_delimiter = ',')]
    pub ratio: Option<Vec<f64>>,
    #[arg(long)]
    pub method: Option<loract::decompose::MethodKind>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BoundsArgs {
    /// Only run one bound (3.1, 3.2, 3.3 or 3.4).
    #[arg(long)]
    pub theorem: Option<loract::bounds::Theorem>,
    /// Instances or Monte Carlo trials, overriding the configured counts.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MemsweepArgs {
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub method: Option<loract::decompose::MethodKind>,
}

/// Loads the configuration and applies the common overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(format) = common.format {
        cfg.output.format = format;
    }
    Ok(cfg)
}

/// Result of one subcommand run.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub config: RunConfig,
    pub written: Vec<PathBuf>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Runs a parsed command line end to end, writing its report.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let mut cfg = resolve_config(&cli.common)?;
    let start = Instant::now();
    let report = match commands::execute(&cli.command, &mut cfg) {
        Ok(report) => report,
        Err(e) => {
            let mut failed = Report::new(cli.command.name());
            failed.check("run", false, e.to_string());
            failed.write(&cfg.output.dir, cfg.output.format, &cfg, start.elapsed().as_millis() as u64)?;
            return Err(e);
        }
    };
    let wall_ms = start.elapsed().as_millis() as u64;
    let written = report.write(&cfg.output.dir, cfg.output.format, &cfg, wall_ms)?;
    Ok(Outcome { report, config: cfg, written })
}

/// Caps the global worker pool from `LORACT_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("LORACT_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("LORACT_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}
