//! `implicit-align`: data generation, training, evaluation, divergence
//! probing and ablation grids.

mod ablate;
mod divergence;
mod eval;
mod gen_data;
mod io;
mod manifest;
mod train;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "implicit-align", version, about = "Implicit class-aligned domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair.
    GenData(gen_data::GenDataArgs),
    /// Train one model and log metrics.
    Train(train::TrainArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(eval::EvalArgs),
    /// Exact minibatch divergence over sampled batch pairs.
    Divergence(divergence::DivergenceArgs),
    /// Run a grid of configs over several seeds.
    Ablate(ablate::AblateArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Divergence(a) => divergence::run(a),
        Command::Ablate(a) => ablate::run(a),
    }
}
