//! `texsyn`: train multi-texture generative models and probe them with
//! sampling, reconstruction, manifold sweeps, detection heatmaps, texture
//! maps, score reports, and voxel-morphology comparisons.
//!
//! Every subcommand stamps its output directory with `manifest.json` (the
//! resolved configuration, seed, input digests, and planned outputs) before
//! writing anything else. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 numerical failure.

mod cmd;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use texsyn_core::CoreError;

#[derive(Parser)]
#[command(name = "texsyn", version, about = "Train and probe multi-texture generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    Train(cmd::TrainArgs),
    /// Draw unconditional samples from a checkpoint.
    Sample(cmd::SampleArgs),
    /// Encode an input and synthesize its reproduction.
    Reconstruct(cmd::ReconstructArgs),
    /// Tile decodings of a swept 2-D global code.
    Manifold(cmd::ManifoldArgs),
    /// Localize where an image matches a reference patch.
    Detect(cmd::DetectArgs),
    /// Resynthesize an image from its spatial texture embedding.
    Texturemap(cmd::TexturemapArgs),
    /// Score a model: inception scores, coverage, statistics, memory.
    Evaluate(cmd::EvaluateArgs),
    /// Compare real and synthetic voxel sets by morphological statistics.
    Analyze3d(cmd::Analyze3dArgs),
}

fn run(cli: &Cli) -> Result<(), CoreError> {
    match &cli.command {
        Command::Train(args) => cmd::cmd_train(args),
        Command::Sample(args) => cmd::cmd_sample(args),
        Command::Reconstruct(args) => cmd::cmd_reconstruct(args),
        Command::Manifold(args) => cmd::cmd_manifold(args),
        Command::Detect(args) => cmd::cmd_detect(args),
        Command::Texturemap(args) => cmd::cmd_texturemap(args),
        Command::Evaluate(args) => cmd::cmd_evaluate(args),
        Command::Analyze3d(args) => cmd::cmd_analyze3d(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CoreError::Config(_) => 2,
                CoreError::Data(_) | CoreError::Io(_) => 3,
                CoreError::Numerical(_) => 4,
            })
        }
    }
}
