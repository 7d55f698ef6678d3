//! `meanteach`: train memorized targets, run unlearning comparisons and the
//! verification suites, with a manifest per output directory.
//!
//! Exit codes: 0 pass, 1 suite failed (or an unexpected I/O error),
//! 2 config error, 3 training failure, 4 missing artifact, 5 precondition
//! guard.

mod commands;
mod manifest;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Context, EXIT_SUITE_FAILED};

#[derive(Parser)]
#[command(
    name = "meanteach",
    version,
    about = "Mean-teacher unlearning experiments"
)]
struct Cli {
    /// Directory for artifacts; relative paths in configs resolve against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true, env = "MEANTEACH_SEED")]
    seed: Option<u64>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a target that memorizes the forget split.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run unlearning methods from a trained target.
    Unlearn {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a verification suite; exits 0 iff it passes.
    Verify {
        #[command(subcommand)]
        suite: Suite,
    },
    /// Check a run directory against its manifest and print its tables.
    Report {
        /// Run directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Suite {
    Theorem1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Uses the default grid when no config is given.
    Lemma {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Dynamics {
        #[arg(long)]
        config: PathBuf,
    },
    DivergenceQuadratic {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let ctx = Context {
        out: cli.out.clone(),
        seed: cli.seed,
    };
    let result = match &cli.command {
        Command::TrainTarget { config } => commands::train_target(&ctx, config),
        Command::Unlearn { config } => commands::unlearn(&ctx, config),
        Command::Verify { suite } => match suite {
            Suite::Theorem1 { config } => commands::verify_theorem1_cmd(&ctx, config),
            Suite::Lemma { config } => commands::verify_lemma_cmd(&ctx, config.as_deref()),
            Suite::Dynamics { config } => commands::verify_dynamics_cmd(&ctx, config),
            Suite::DivergenceQuadratic { config } => commands::verify_quadratic_cmd(&ctx, config),
        },
        Command::Report { dir } => commands::report(dir.as_deref().unwrap_or(&cli.out)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_SUITE_FAILED),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
