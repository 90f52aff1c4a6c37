//! Command-line front end: reproducible runs over the library's synthetic
//! data generator, trainer, evaluators, aligner, and identity pipeline.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "keyscene",
    about = "Story-conditioned key-scene retrieval toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset tree.
    GenSynth(commands::GenSynthArgs),
    /// Train a retrieval model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Score a split and report rank metrics.
    Evaluate(commands::EvaluateArgs),
    /// Align movie clips to plot sentences.
    Align(commands::AlignArgs),
    /// Build a character embedding bank from per-actor face embeddings.
    BuildCeb(commands::BuildCebArgs),
    /// Label a movie's face tracks against a character bank.
    AssignTracks(commands::AssignTracksArgs),
    /// Check model gradients against central finite differences.
    GradCheck(commands::GradCheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => commands::gen_synth(args),
        Command::Train(args) => commands::train_cmd(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Align(args) => commands::align(args),
        Command::BuildCeb(args) => commands::build_ceb(args),
        Command::AssignTracks(args) => commands::assign_tracks(args),
        Command::GradCheck(args) => commands::grad_check_cmd(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
