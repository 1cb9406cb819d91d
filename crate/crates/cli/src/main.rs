//! `tt`: train, decode, evaluate and self-test transformer transducers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),
    /// A check ran and failed.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] tt_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(tt_core::Error::NonFinite { .. } | tt_core::Error::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "tt", version, about = "Transformer transducer toolkit")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Beam,
    Stream,
}

#[derive(clap::Args, Clone, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to decode.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    mode: Mode,
    /// Run config whose `decode` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_symbols_per_frame: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
    #[arg(long)]
    length_bonus: Option<f64>,
    /// Dataset whose label sequences train the bigram fusion model.
    #[arg(long)]
    lm_data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one transcript per utterance, ordered by id.
    Decode {
        #[command(flatten)]
        args: DecodeArgs,
        /// Write transcripts here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode and print a JSON error-rate report.
    Eval {
        #[command(flatten)]
        args: DecodeArgs,
    },
    /// Run the built-in consistency suites.
    Selftest {
        /// Perturb the loss recursion so the oracle suite must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a synthetic dataset.
    GenData {
        /// Synthetic task config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw a separate split of the same task under this name.
        #[arg(long)]
        split: Option<String>,
        /// Override the utterance count.
        #[arg(long)]
        utterances: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    eprintln!("threads: {} (computation runs on one thread)", cli.threads);
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Decode { args, output } => commands::decode(&args, output.as_deref()),
        Command::Eval { args } => commands::eval(&args),
        Command::Selftest { inject_fault } => commands::selftest(inject_fault),
        Command::GenData {
            config,
            out,
            split,
            utterances,
        } => commands::gen_data(&config, &out, split.as_deref(), utterances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
