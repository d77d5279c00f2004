//! Embedder stand-in: image statistics as feature vectors, one row per
//! image in `<dataset>/images`.

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use teachhub::mock::write_embeddings;

#[derive(Debug, Parser)]
struct Args {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let args = Args::parse();
    write_embeddings(&args.dataset, &args.out)?;
    Ok(())
}
