//! Command-line surface: training runs, gradient checks, cost sweeps and
//! self-checks, each writing JSON-lines reports and a short stdout summary.

pub mod commands;
pub mod config;
pub mod report;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] crosslmm::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(crosslmm::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crosslmm", version, about = "Train, check and cost the cross-attention video LMM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage training on synthetic clips; writes metrics and a checkpoint.
    Train(RunArgs),
    /// Finite-difference gradient check per parameter group.
    Gradcheck(RunArgs),
    /// Baseline vs cross-attention cost sweep over frame counts.
    Costmodel(CostArgs),
    /// Runs every module's invariant suite at toy scale.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file or preset name (toy, toy-overfit, 2b-like, 7b-like, 7b-like-flat).
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated frame counts, e.g. `32,64,128,256`.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value = "runs/selfcheck")]
    pub out: PathBuf,
}

/// Runs one command. `Ok(false)` means a check failed after its reports
/// were written.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<bool, CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&resolve(&a)?, stdout),
        Command::Gradcheck(a) => commands::gradcheck(&resolve(&a)?, stdout),
        Command::Costmodel(a) => {
            let mut cfg = resolve(&a.run)?;
            if let Some(frames) = a.frames {
                config::validate_frames(&frames)?;
                cfg.cost.frames = frames;
            }
            commands::costmodel(&cfg, stdout)
        }
        Command::Selfcheck(a) => commands::selfcheck(&a.out, stdout),
    }
}

fn resolve(a: &RunArgs) -> Result<config::RunConfig, CliError> {
    let mut cfg = config::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}
