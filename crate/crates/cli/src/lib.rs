//! Command-line front end: argument parsing, run configuration and file formats.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::Parser;

pub use commands::Command;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "texmesh", version, about = "Textured mesh extraction, rendering, fitting and evaluation")]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set fit.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every random choice (fit init, GAN training, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

/// Load config, validate arguments and run. Returns the JSON report.
pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    cfg.set_seed(cli.seed);
    commands::check_args(&cli.command)?;
    commands::run(&cli.command, &cfg, cli.seed)
}
