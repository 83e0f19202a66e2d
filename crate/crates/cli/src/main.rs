//! `netop`: generate faulted networks, verify the oracle, train and evaluate
//! the repair operator, and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 oracle/evaluation failure, 2 config or path
//! error, 3 training did not converge, 4 checkpoint error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: anyhow::Error) -> Self {
        Self { code, error }
    }
}

#[derive(Parser)]
#[command(name = "netop", version, about = "Autonomous network fault diagnosis and repair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write faulted network-state documents.
    Generate(GenerateArgs),
    /// Replay the oracle on fresh networks and check every one is repaired.
    OracleCheck(OracleCheckArgs),
    /// Two-phase training; writes the checkpoint and a metrics log.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on held-out networks.
    Evaluate(EvaluateArgs),
    /// Print checkpoint metadata as JSON.
    Inspect(InspectArgs),
    /// Summarize a training metrics log.
    Report(ReportArgs),
    /// Export one episode as JSON lines.
    Trace(TraceArgs),
    /// Print the token vocabulary and its hash.
    Vocab,
    /// Print a run configuration with every field filled in.
    Config(ConfigArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, env = "NETOP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration supplying the simulator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct OracleCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, env = "NETOP_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Test hook: permute the repair-command entries of the action table.
    #[arg(long, hide = true)]
    pub corrupt_action_table: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Final checkpoint path (overrides `paths.checkpoint`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics log path (overrides `paths.metrics`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Phase-one checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub networks: Option<usize>,
    #[arg(long, env = "NETOP_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Run configuration supplying the simulator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Exit 1 unless every network is repaired without a wrong step.
    #[arg(long)]
    pub require_perfect: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct TraceArgs {
    /// Checkpoint driving the episode; the oracle is used when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, env = "NETOP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Network index within the seed's sequence.
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Reduced-pool preset.
    #[arg(long)]
    pub desk: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::OracleCheck(a) => commands::oracle_check(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Report(a) => commands::report(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Vocab => commands::vocab(),
        Command::Config(a) => commands::config(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
