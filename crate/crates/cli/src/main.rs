//! `l0sparse`: train, evaluate and inspect L0-regularized sparse networks.
//!
//! Exit codes: 0 success, 1 other failures, 2 config or model errors,
//! 3 numeric abort during training. Set `L0SPARSE_LOG` (e.g. `debug`,
//! `warn`) to control log verbosity on stderr.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "l0sparse", version, about = "Sparse networks through L0 regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a saved model on the test split of a config's dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a JSON pruning report for a saved model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Gates with test-time value above this count as active.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("L0SPARSE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out_dir,
            seed_override,
        } => commands::cmd_train(&config, out_dir, seed_override),
        Command::Eval { model, config } => commands::cmd_eval(&model, &config),
        Command::Report { model, threshold } => commands::cmd_report(&model, threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
