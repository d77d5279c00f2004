//! Detector stand-in: reads frame lines on stdin, writes prediction lines on
//! stdout.

use std::io;
use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use teachhub::mock::{run_detector, DetectorSource};

#[derive(Debug, Parser)]
struct Args {
    /// Accepted for compatibility with real detectors; unused.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "v0")]
    model_version: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    classes: u32,
    /// Replay `<dir>/<frame_id>.txt` prediction files instead of random boxes.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let source = match args.fixtures {
        Some(dir) => DetectorSource::fixtures(dir)?,
        None => DetectorSource::Seeded { seed: args.seed, classes: args.classes },
    };
    run_detector(io::stdin().lock(), io::stdout().lock(), &source, &args.model_version)?;
    Ok(())
}
