mod check;
mod commands;
mod config;
mod error;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfgp_core::synthetic::SyntheticKind;

use crate::commands::GenArgs;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "mfgp", version, about = "Multi-fidelity Gaussian processes on learned linear embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Example1,
    Example2,
    Highdim,
}

impl From<Which> for SyntheticKind {
    fn from(w: Which) -> Self {
        match w {
            Which::Example1 => SyntheticKind::Example1,
            Which::Example2 => SyntheticKind::Example2,
            Which::Highdim => SyntheticKind::Highdim,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset: one CSV per level, a test CSV, and a manifest.
    Gen {
        which: Option<Which>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of held-out points (0 for none).
        #[arg(long)]
        test_points: Option<usize>,
    },
    /// Train one model and write checkpoint, trace and summary files.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the highest fidelity at the points of a CSV file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train for several latent dimensions and select one by BIC.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        d_list: Option<Vec<usize>>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical checks, optionally against a checkpoint.
    Check {
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen { which, config, seed, out, test_points } => {
            commands::gen(GenArgs { which: which.map(Into::into), config, seed, out, test_points })
        }
        Cmd::Train { config, seed, out } => commands::train_cmd(&config, seed, out),
        Cmd::Predict { checkpoint, test, out } => commands::predict_cmd(&checkpoint, &test, &out),
        Cmd::Sweep { config, d_list, test, seed, out } => commands::sweep_cmd(&config, d_list, test, seed, out),
        Cmd::Check { checkpoint, seed } => {
            let lines = check::run_checks(seed, checkpoint.as_deref());
            for l in &lines {
                println!("{}", l.render());
            }
            let failed = lines.iter().filter(|l| !l.passed()).count();
            println!("{} checks, {failed} failed", lines.len());
            if failed > 0 {
                return Err(CliError::failure(format!("{failed} checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
