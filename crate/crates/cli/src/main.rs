//! Spline mixed-model fitting from the command line.
//!
//! Three subcommands: `fit` estimates one model, `select` searches a grid
//! of basis sizes with three information criteria, `simulate` runs a
//! Monte Carlo study of those criteria. Settings come from flags, from a
//! flat TOML file via `--config`, or both; flags win key by key.
//! `--print-config` shows the merged settings and exits. Failures print
//! one JSON record to stderr and exit 3 (unreadable input), 4 (numerical
//! failure), or 2 (command-line usage, reported by the parser itself).

mod artifacts;
mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{AppError, AppResult};

#[derive(Parser)]
#[command(
    name = "splinemix",
    version,
    about = "Spline mixed-effects models for longitudinal data"
)]
struct Cli {
    /// Flat TOML file with defaults for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the merged settings as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model with fixed basis sizes.
    Fit(config::FitArgs),
    /// Fit every model on a grid of basis sizes and rank them.
    Select(config::SelectArgs),
    /// Monte Carlo study of the selection criteria.
    Simulate(config::SimulateArgs),
}

fn merged<T>(cli_args: T, config: &Option<PathBuf>, merge: impl Fn(T, T) -> T) -> AppResult<T>
where
    T: serde::de::DeserializeOwned,
{
    Ok(match config {
        Some(path) => merge(cli_args, config::load(path)?),
        None => cli_args,
    })
}

fn print_config<T: Serialize>(settings: &T) -> AppResult<()> {
    let text = toml::to_string(settings)
        .map_err(|e| AppError::Io(format!("cannot encode settings: {e}")))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Fit(args) => {
            let settings = merged(args, &cli.config, config::FitArgs::merge_over)?;
            if cli.print_config {
                return print_config(&settings);
            }
            commands::run_fit(settings)
        }
        Command::Select(args) => {
            let settings = merged(args, &cli.config, config::SelectArgs::merge_over)?;
            if cli.print_config {
                return print_config(&settings);
            }
            commands::run_select(settings)
        }
        Command::Simulate(args) => {
            let settings = merged(args, &cli.config, config::SimulateArgs::merge_over)?;
            if cli.print_config {
                return print_config(&settings);
            }
            commands::run_simulate(settings)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({
            "kind": e.kind(),
            "message": e.message(),
            "exit_code": e.exit_code(),
        });
        eprintln!("{record}");
        std::process::exit(e.exit_code());
    }
}
