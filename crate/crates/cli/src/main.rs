//! `larft`: dataset construction, training, evaluation, probing and scoring.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<larft::Error> for CliError {
    fn from(e: larft::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "larft", version, about = "Length-aware RL fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset construction
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a tiny policy on the toy length task
    Train(commands::TrainArgs),
    /// Score supplied outputs against bench cases
    Eval(commands::EvalArgs),
    /// Layer-wise length probes on a trained policy
    Probe(commands::ProbeArgs),
    /// Length metrics for JSON lines of {text, target_words}
    Score(commands::ScoreArgs),
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Run the filtering, curation and synthesis pipeline over a corpus
    Build(commands::DataBuildArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Data(DataCommand::Build(a)) => commands::data_build(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Score(a) => commands::score(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(CliError::Usage(String::new()).code()),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
