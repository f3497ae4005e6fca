//! `evadapt`: convert event recordings to frames, classify them from
//! embeddings, train adapters and pseudo-label unlabelled data.
//!
//! Exit codes: 0 on success, 1 for invalid arguments, configs or inputs,
//! 2 when a valid run fails (I/O, divergence, no pseudo-labels).

mod commands;
mod config;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{bench, convert, embed, eval, pseudolabel, synth, train};
use crate::config::Settings;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "evadapt",
    version,
    about = "Event-camera classification with frozen embeddings and adapters"
)]
struct Cli {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a labelled synthetic event dataset.
    GenSynthetic(synth::Args),
    /// Convert event streams into frames plus a manifest.
    Convert(convert::Args),
    /// Embed event streams with the seeded synthetic encoder.
    EmbedSynthetic(embed::Args),
    /// Classify an embedding bundle and report accuracy.
    Eval(eval::EvalArgs),
    /// Train an adapter on few-shot samples.
    Train(train::Args),
    /// Pseudo-label an event dataset and self-train.
    Pseudolabel(pseudolabel::Args),
    /// Top-1 accuracy over a grid of ensemble weights.
    EnsembleGrid(eval::GridArgs),
    /// Time event-to-frame conversion.
    Bench(bench::Args),
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynthetic(a) => synth::run(a, &cfg),
        Command::Convert(a) => convert::run(a, &cfg),
        Command::EmbedSynthetic(a) => embed::run(a, &cfg),
        Command::Eval(a) => eval::run_eval(a, &cfg),
        Command::Train(a) => train::run(a, &cfg),
        Command::Pseudolabel(a) => pseudolabel::run(a, &cfg),
        Command::EnsembleGrid(a) => eval::run_grid(a, &cfg),
        Command::Bench(a) => bench::run(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
