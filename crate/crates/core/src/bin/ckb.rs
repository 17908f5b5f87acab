//! Experiment driver for the continuous knowledge base.
//!
//! Usage: `ckb <command> --config <path> [--seed N] [--out DIR]`
//! Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 io error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ckb_core::config::RunConfig;
use ckb_core::harness::{cmd_run, Command};

#[derive(Parser)]
#[command(
    name = "ckb",
    about = "Import and export neural-network function knowledge through a continuous knowledge base",
    version
)]
struct Cli {
    /// One of: train, import, export, roundtrip, fuse, kd, tl, eval.
    command: String,
    /// Path to a `section.key = value` run config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match Command::parse(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cmd_run(command, &cfg) {
        Ok(summary) => {
            for (k, v) in &summary {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
