//! `pidlrsc`: generate synthetic bags, train, evaluate, explain, run the
//! ablation grid and check gradients.
//!
//! Exit codes: 0 success, 1 gradient contract failure, 2 training
//! divergence, 3 I/O, configuration or data errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Env, SplitChoice};
use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Io(String),
    #[error("gradient contract failed: {0}")]
    Contract(String),
    #[error(transparent)]
    Lib(#[from] pid_lrsc::Error),
}

impl CliError {
    pub fn config(key: &str, message: &str) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Lib(pid_lrsc::Error::Divergence { .. }) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pidlrsc", version, about)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generation and training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress and tables on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (bags, manifest, roles, prototypes).
    Gen,
    /// Train on the training split; writes a checkpoint and metrics.jsonl.
    Train,
    /// Score a checkpoint; writes report.json and projections.csv.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
    /// Per-instance semantic map of one bag.
    Explain {
        #[arg(long)]
        bag_id: u64,
    },
    /// Train and score every ablation variant for every configured seed.
    Ablate,
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Test hook: corrupt one analytic coordinate.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    config.validate()?;
    let paths = config.resolve(cli.out.as_deref());
    std::fs::create_dir_all(&paths.output)
        .map_err(|e| CliError::Io(format!("{}: {e}", paths.output.display())))?;
    let env = Env {
        config,
        paths,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Gen => commands::gen(&env),
        Command::Train => commands::train(&env),
        Command::Eval { split } => commands::evaluate(&env, split),
        Command::Explain { bag_id } => commands::explain(&env, bag_id),
        Command::Ablate => commands::ablate(&env),
        Command::Gradcheck { inject_fault } => commands::gradcheck(&env, inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
