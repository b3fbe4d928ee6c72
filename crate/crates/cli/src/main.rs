mod commands;
mod config;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunArgs;

/// Configuration or input error; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Model-free speculative decoding: benchmarks, tree optimization and analysis.
#[derive(Parser)]
#[command(name = "stand", version)]
struct Cli {
    /// JSON file with defaults for any flag (snake_case keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode trajectories and write them with a metrics report.
    Decode,
    /// Measure node statistics on the 625-node tree and prune to --k nodes.
    TreeOptimize,
    /// N-gram overlap across trajectory files.
    Overlap {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Inspect, import or export n-gram store files.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
    /// Exact acceptance probability of stochastic vs deterministic drafting.
    Probe,
    /// Write synthetic model specs and prompts.
    Synth,
}

#[derive(Subcommand)]
enum StoreAction {
    /// Print per-level key counts of a store file.
    Inspect { file: PathBuf },
    /// Validate a store file (against --vocab-size or the model) and write a normalized copy.
    Import { file: PathBuf },
    /// Decode the first problem and write the resulting store.
    Export,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let args = match &cli.config {
        Some(path) => cli.run.over(RunArgs::load(path)?),
        None => cli.run,
    };
    match cli.command {
        Command::Decode => commands::decode(&args),
        Command::TreeOptimize => commands::tree_optimize(&args),
        Command::Overlap { inputs } => commands::overlap(&args, &inputs),
        Command::Store { action: StoreAction::Inspect { file } } => commands::store_inspect(&file),
        Command::Store { action: StoreAction::Import { file } } => commands::store_import(&args, &file),
        Command::Store { action: StoreAction::Export } => commands::store_export(&args),
        Command::Probe => commands::probe(&args),
        Command::Synth => commands::synth(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
