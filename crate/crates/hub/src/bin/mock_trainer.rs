//! Trainer stand-in: copies the base weights and appends a note.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use teachhub::mock::train;

#[derive(Debug, Parser)]
struct Args {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    base_weights: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    /// Always exit 1 without writing weights.
    #[arg(long)]
    fail: bool,
    /// Fail the first time only: creates this file, and succeeds once it exists.
    #[arg(long)]
    fail_once: Option<PathBuf>,
    /// Append one line per invocation to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> Result<ExitCode> {
    let args = Args::parse();
    if let Some(log) = &args.log {
        let mut f = OpenOptions::new().create(true).append(true).open(log).context("opening --log")?;
        writeln!(f, "{}", args.dataset.display())?;
    }
    let fail_now = match &args.fail_once {
        Some(flag) if !flag.exists() => {
            fs::write(flag, b"failed once\n").context("writing --fail-once flag")?;
            true
        }
        _ => args.fail,
    };
    if fail_now {
        eprintln!("mock-trainer: failing as requested");
        return Ok(ExitCode::FAILURE);
    }
    train(&args.dataset, &args.base_weights, &args.out_weights)?;
    Ok(ExitCode::SUCCESS)
}
