//! `prism`: operator entry points for every pipeline stage.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Seed used when neither `--seed` nor the config file sets one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "prism", version, about = "Clarify complex user intents with dependency-ordered questions")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print results and errors as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Config file (default: $PRISM_CONFIG, then ./prism.yaml). Goes
    /// before the subcommand.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    Lexical,
    Nli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorKind {
    Mc,
    Exhaustive,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a CID dataset file.
    Validate {
        /// Dataset file.
        file: PathBuf,
    },
    /// Decompose an instruction into its intent schema and layers.
    Decompose {
        #[arg(long)]
        instruction: String,
    },
    /// Run simulated clarification sessions and write trajectory JSONL.
    Simulate {
        #[arg(long)]
        instruction: String,
        /// Simulated user profile (JSON or YAML).
        #[arg(long, value_name = "FILE")]
        profile: PathBuf,
        /// Number of sessions.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Output file (default: stdout).
        #[arg(long, short, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score recorded trajectories.
    Reward {
        /// Trajectory JSONL file.
        #[arg(long, value_name = "FILE")]
        trajectory: PathBuf,
        #[arg(long, value_enum, default_value = "lexical")]
        provider: Provider,
        /// Recorded saliency file, required with `--provider nli`.
        #[arg(long, value_name = "FILE")]
        saliency: Option<PathBuf>,
        /// Also estimate intent-aware reward at each turn.
        #[arg(long, value_enum)]
        estimator: Option<EstimatorKind>,
        /// Rollouts per turn for the Monte Carlo estimator.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Only this turn.
        #[arg(long)]
        turn: Option<usize>,
        /// Simulated user profile; defaults to the recorded answers.
        #[arg(long, value_name = "FILE")]
        profile: Option<PathBuf>,
        /// Sum raw products instead of averaging per token.
        #[arg(long)]
        raw: bool,
    },
    /// Run one data-generation round.
    GenerateData {
        /// Round config (YAML).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Compute the metric report for trajectory files.
    Evaluate {
        /// Glob of trajectory JSONL files.
        #[arg(long, value_name = "GLOB")]
        trajectories: String,
        /// Gold annotation file (JSON array).
        #[arg(long, value_name = "FILE")]
        gold: Option<PathBuf>,
        /// Execution log file (JSON array).
        #[arg(long, value_name = "FILE")]
        logs: Option<PathBuf>,
        /// Ask the backend to judge option reasonableness.
        #[arg(long)]
        judge: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Session journal directory (default: $PRISM_DATA_DIR, else memory only).
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_env("PRISM_LOG")
        .init();
    let json = cli.json;
    match commands::run(cli) {
        Ok(code) => code,
        Err(failure) => {
            failure.report(json);
            failure.exit_code()
        }
    }
}
