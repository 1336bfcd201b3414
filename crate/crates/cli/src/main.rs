//! `fscil-forge`: command-line front end for the deterministic point-cloud
//! few-shot class-incremental learning pipeline in `fscil-core`.
//!
//! Exit codes: 0 on success; 2 for problems the caller can fix (bad flags,
//! malformed or missing input files, invalid configuration); 1 for runtime
//! failures inside an otherwise well-formed experiment.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A user-input problem: wrong flag combination, unknown name, bad value.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(
    name = "fscil-forge",
    version,
    about = "Deterministic few-shot class-incremental learning on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a session schedule from dataset manifests, or emit a shipped one.
    GenBenchmark(commands::GenBenchmarkArgs),
    /// Materialize synthetic clouds plus their dataset manifest.
    GenSyntheticData(commands::GenSyntheticDataArgs),
    /// Precompute embedding files for every sample of a schedule.
    Embed(commands::EmbedArgs),
    /// Fit the principal directions of the base session and save them.
    FitBasis(commands::FitBasisArgs),
    /// Run all sessions, writing checkpoints, logs, and config snapshots.
    Train(commands::TrainArgs),
    /// Rescore a training checkpoint into a prediction log.
    Eval(commands::EvalArgs),
    /// Compile metrics from a finished run into JSON and a text table.
    Report(commands::ReportArgs),
    /// Train the five feature-flag variants and tabulate their metrics.
    Ablate(commands::AblateArgs),
}

/// Separates caller-fixable mistakes (exit 2) from runtime failures
/// (exit 1) by walking the error chain.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<fscil_core::Error>() {
            return match core {
                fscil_core::Error::Config(_)
                | fscil_core::Error::Manifest(_)
                | fscil_core::Error::UnknownShape(_)
                | fscil_core::Error::Format(_)
                | fscil_core::Error::Json(_) => 2,
                fscil_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(message) = commands::init_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenBenchmark(args) => commands::cmd_gen_benchmark(&args),
        Command::GenSyntheticData(args) => commands::cmd_gen_synthetic_data(&args),
        Command::Embed(args) => commands::cmd_embed(&args),
        Command::FitBasis(args) => commands::cmd_fit_basis(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Report(args) => commands::cmd_report(&args),
        Command::Ablate(args) => commands::cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
