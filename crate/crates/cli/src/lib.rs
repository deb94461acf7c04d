//! Command-line driver: argument parsing, configuration, and the
//! subcommands that run, verify, analyse and export.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{load_config, parse_config, Format, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// A scientific check did not hold; outputs were still written.
    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] tsam_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use tsam_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Argument(_) | E::Io { .. } | E::Json(_) | E::Ingestion { .. } => {
                    2
                }
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsam", version, about = "Text self-attention guidance toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub format: Option<Format>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct GuidanceFlags {
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Comma-separated step list, e.g. `0,10,20`.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long, value_parser = ["tifa", "anE", "ane"])]
    pub preset: Option<String>,
    /// Run the alpha x gamma grid instead of a single configuration.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Claim {
    Prop1,
    Prop2,
    A4,
    Mgf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig2a,
    Fig2b,
    Fig4,
    Fig5a,
    Fig5b,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Guided and unguided sandbox loops over a block of seeds.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Monte Carlo check of one approximation claim.
    Verify {
        claim: Claim,
        #[command(flatten)]
        common: Common,
    },
    /// Plot-ready data for one figure analogue.
    Analyze {
        figure: Figure,
        #[command(flatten)]
        common: Common,
    },
    /// Encodes one synthetic prompt and writes its tensors.
    DumpEncoding {
        #[command(flatten)]
        common: Common,
    },
    /// Validates an exported cross-attention state.
    ImportMaps {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Caps the global worker pool from `TSAM_THREADS`.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TSAM_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
            CliError::Config(format!("TSAM_THREADS = {v:?} must be an integer >= 1"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("TSAM_THREADS: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    commands::dispatch(cli.command)
}
