use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod exit;

use exit::CliError;

/// Pose tokenization data plane: bin fitting, token codec, trajectory
/// projection, geometric priors and 3D grounding evaluation.
#[derive(Parser, Debug)]
#[command(name = "posekit", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Bin tables written by `fit-bins`.
    #[arg(long, global = true, env = "POSEKIT_QUANTIZERS")]
    pub quantizers: Option<PathBuf>,
    /// JSON file with per-family vocabulary sizes.
    #[arg(long, global = true)]
    pub vocab_config: Option<PathBuf>,
    /// Abort on the first bad record (default).
    #[arg(long, global = true, conflicts_with = "skip_on_error")]
    pub strict: bool,
    /// Log and count bad records instead of aborting.
    #[arg(long, global = true)]
    pub skip_on_error: bool,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit quantile bin tables from scene/trajectory records.
    FitBins(commands::FitBinsArgs),
    /// Serialize records into token IDs plus a manifest.
    Encode(commands::EncodeArgs),
    /// Parse token IDs back into tuples and trajectories.
    Decode(commands::DecodeArgs),
    /// Project trajectories into camera frames and resample them.
    Project(commands::ProjectArgs),
    /// Build patchified raymap and depth/mask fields for one camera.
    Priors(commands::PriorsArgs),
    /// Emit training bundles (tokens, priors, manifest).
    Emit(commands::EmitArgs),
    /// Score predictions against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Check records against the schemas.
    Validate(commands::ValidateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::FitBins(a) => commands::fit_bins(g, a),
        Command::Encode(a) => commands::encode(g, a),
        Command::Decode(a) => commands::decode(g, a),
        Command::Project(a) => commands::project(g, a),
        Command::Priors(a) => commands::priors(g, a),
        Command::Emit(a) => commands::emit(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Validate(a) => commands::validate(g, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors exit with 1 so that 2 stays reserved for schema errors.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::GENERAL) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
