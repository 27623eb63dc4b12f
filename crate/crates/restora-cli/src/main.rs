//! Deterministic toy-corpus generation, degradation synthesis, statistics
//! fitting, guided restoration, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod cmd_degrade;
mod cmd_eval;
mod cmd_fit;
mod cmd_gencorpus;
mod cmd_restore;
mod util;

use clap::{Parser, Subcommand};
use restora_core::ErrorCategory;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "restora",
    about = "Degradation statistics and guided-diffusion restoration at desk scale",
    version
)]
pub struct Cli {
    /// Flat key-value config file (dotted keys, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the config's guide.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for image-level parallelism. Results are independent
    /// of the job count.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a deterministic toy corpus of PPM images plus a manifest.
    Gencorpus(cmd_gencorpus::Args),
    /// Apply degradations to a directory of images.
    Degrade(cmd_degrade::Args),
    /// Fit GGD statistics per image in the pixel or latent domain.
    Fit(cmd_fit::Args),
    /// Run the staged guided restoration over a directory.
    Restore(cmd_restore::Args),
    /// Compute full-reference metrics between two directories.
    Eval(cmd_eval::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits.
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Gencorpus(args) => cmd_gencorpus::run(&cli, args),
        Command::Degrade(args) => cmd_degrade::run(&cli, args),
        Command::Fit(args) => cmd_fit::run(&cli, args),
        Command::Restore(args) => cmd_restore::run(&cli, args),
        Command::Eval(args) => cmd_eval::run(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            };
            ExitCode::from(code)
        }
    }
}
