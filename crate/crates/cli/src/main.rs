//! tsdiff: train, sample from, and evaluate interpretable diffusion models
//! for time series. One JSON config file describes a run; subcommands
//! execute its stages. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use tsdiff_cli::commands::{self, CliError, Task};
use tsdiff_cli::config;

#[derive(Parser)]
#[command(
    name = "tsdiff",
    version,
    about = "Interpretable seasonal-trend diffusion models for time series",
    after_help = config::help_text()
)]
struct Cli {
    /// More log detail: -v info, -vv debug.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config's dataset as CSV windows plus a manifest.
    Gendata {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir, then $TSDIFF_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured denoiser; an existing checkpoint resumes.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw unconditional samples from a trained model.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Trained model checkpoint (JSON).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Threads for independent windows: 1 sequential, 0 the default pool.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Fill hidden coordinates of held-out windows (geometric mask).
    Impute {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Continue held-out windows past an observed prefix (forecast mask).
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Score a generated window set against a real one.
    Evaluate {
        /// Real windows: a gendata directory or a windows CSV.
        #[arg(long)]
        real: PathBuf,
        /// Generated windows: a directory or a windows CSV.
        #[arg(long)]
        fake: PathBuf,
        /// Report destination; a leaderboard row is appended next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Gendata { config, out, seed } => {
            commands::gendata(&config, out.as_deref(), seed)
        }
        Command::Train { config, out, seed } => commands::train(&config, out.as_deref(), seed),
        Command::Sample { config, checkpoint, out, seed, workers } => {
            commands::sample(&config, &checkpoint, out.as_deref(), seed, workers)
        }
        Command::Impute { config, checkpoint, out, seed, workers } => {
            commands::conditional(Task::Impute, &config, &checkpoint, out.as_deref(), seed, workers)
        }
        Command::Forecast { config, checkpoint, out, seed, workers } => {
            commands::conditional(Task::Forecast, &config, &checkpoint, out.as_deref(), seed, workers)
        }
        Command::Evaluate { real, fake, out, seed } => {
            commands::evaluate(&real, &fake, &out, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
