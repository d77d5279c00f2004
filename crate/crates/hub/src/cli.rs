use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use teachhub_core::annotations::{parse_label_file, parse_prediction_file, ClassMap, ClassRemap, DROP_CLASS};
use teachhub_core::diversity::{load_embeddings, normalize_scores, EmbeddingTable};
use teachhub_core::evaluation::{map_at, DetectionScene, GroundTruthScene, MAP50_IOU};
use teachhub_core::{Store, DEFAULT_BINS};
use teachhub::clock::{Clock, SystemClock};
use teachhub::config::{HubConfig, DEFAULT_CACHE_BOUND};
use teachhub::report::{format_score, render_import, render_report, report_rows};
use teachhub::simulate::{simulate, SimulateOptions};
use teachhub::{run_hub, HubOptions};

/// Interactive detector teaching: hub, dataset tools and reports.
#[derive(Debug, Parser)]
#[command(name = "teachhub", version)]
pub struct Cli {
    /// Output style for tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the hub until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Copy a YOLO dataset (images/, labels/, classes.txt) into a store.
    Import {
        src: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Class consolidation, e.g. "door_a=door,door_b=door,knob=handle".
        #[arg(long, value_parser = parse_remap)]
        remap: Option<ClassRemap>,
    },
    /// Diversity score of every fine-tuning round.
    Score {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Per-class AP and mAP of prediction files against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long, default_value_t = MAP50_IOU)]
        iou: f64,
        /// Class names, one per line (default: <gt_dir>/classes.txt, else door/handle).
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Per-round collection counts, diversity and model versions.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// Recompute scores from this embedding table instead of the ledger.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Run a scripted teaching session against a local hub with mock plugins.
    Simulate {
        frames_dir: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 3)]
        rounds: u32,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        per_round: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hub config supplying plugin commands, bins and cache bound.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum box perturbation as a fraction of box size.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
}

fn parse_remap(s: &str) -> Result<ClassRemap, String> {
    s.parse().map_err(|e: teachhub_core::annotations::AnnotationError| e.to_string())
}

/// A failure with its exit status: 1 for data errors, 2 for usage errors.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure { code: 1, error: error.into() }
    }
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let format = cli.format;
    match cli.command {
        Command::Serve { config } => {
            let config = HubConfig::load(&config).map_err(usage)?;
            runtime()?.block_on(run_hub(&config, HubOptions::default())).context("hub stopped")?;
        }
        Command::Import { src, store, remap } => import(&src, &store, remap.unwrap_or_default(), format)?,
        Command::Score { store, embeddings, bins } => score(&store, &embeddings, bins, format)?,
        Command::Eval { pred_dir, gt_dir, iou, classes } => eval(&pred_dir, &gt_dir, iou, classes.as_deref(), format)?,
        Command::Report { store, embeddings, bins } => {
            let store = Store::open(&store)?;
            let raw = embeddings
                .map(|path| -> Result<_> {
                    let table = load_embeddings(&path)?;
                    Ok(round_scores(&store, &table, bins)?.into_iter().map(|s| (s.round, s.raw_hades)).collect())
                })
                .transpose()?;
            let rows = report_rows(store.ledger(), raw.as_ref());
            emit(format, &rows, || render_report(&rows))?;
        }
        Command::Simulate { frames_dir, store, rounds, per_round, seed, config, jitter } => {
            if !(0.0..1.0).contains(&jitter) {
                return Err(usage(anyhow!("--jitter must be in [0, 1)")));
            }
            let config = match config {
                Some(path) => HubConfig::load(&path).map_err(usage)?,
                None => mock_config(seed)?,
            };
            let options = SimulateOptions { frames_dir, rounds, per_round, seed, jitter, config, store_root: store };
            let outcome = runtime()?.block_on(simulate(options))?;
            let store = &outcome.hub.store;
            let rows = report_rows(store.ledger(), None);
            #[derive(Serialize)]
            struct Simulated<'a> {
                saves: usize,
                trainer_runs: usize,
                current_model: Option<&'a str>,
                rounds: &'a [teachhub::report::ReportRow],
            }
            let current = store.current_model().map(|m| m.version.as_str());
            let summary = Simulated { saves: outcome.saves, trainer_runs: outcome.hub.trainer_runs, current_model: current, rounds: &rows };
            emit(format, &summary, || {
                format!(
                    "{}saves: {}, trainer runs: {}, current model: {}\n",
                    render_report(&rows),
                    outcome.saves,
                    outcome.hub.trainer_runs,
                    current.unwrap_or("none")
                )
            })?;
        }
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().context("cannot start the async runtime")
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Text => print!("{}", text()),
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

/// Mock plugins from the directory holding this executable.
fn mock_config(seed: u64) -> Result<HubConfig, Failure> {
    let exe = std::env::current_exe().context("cannot locate the teachhub executable")?;
    let dir = exe.parent().ok_or_else(|| anyhow!("executable has no parent directory"))?;
    let tool = |name: &str| -> Result<String> {
        let path = dir.join(name);
        let text = path.to_str().ok_or_else(|| anyhow!("non-UTF-8 path {}", path.display()))?;
        Ok(shlex::try_quote(text)?.into_owned())
    };
    Ok(HubConfig {
        listen_tcp: "127.0.0.1:0".into(),
        listen_ws: "127.0.0.1:0".into(),
        store_root: PathBuf::new(),
        detector_cmd: format!("{} --seed {seed}", tool("mock-detector")?),
        trainer_cmd: tool("mock-trainer")?,
        embedder_cmd: Some(tool("mock-embedder")?),
        cache_bound: DEFAULT_CACHE_BOUND,
        bins: DEFAULT_BINS,
        initial_weights: None,
    })
}

fn import(src: &Path, store_root: &Path, remap: ClassRemap, format: Format) -> Result<()> {
    let mut store = if store_root.join("manifest.json").exists() {
        Store::open(store_root)?
    } else {
        let classes = src.join("classes.txt");
        let text = fs::read_to_string(&classes).with_context(|| format!("cannot read {}", classes.display()))?;
        let src_map = ClassMap::parse(&text).with_context(|| classes.display().to_string())?;
        let mut names: Vec<String> = Vec::new();
        for name in src_map.names() {
            let target = remap.get(name).unwrap_or(name);
            if target != DROP_CLASS && !names.iter().any(|n| n == target) {
                names.push(target.to_string());
            }
        }
        Store::init(store_root, ClassMap::new(names)?, None, SystemClock.now_ms())?
    };
    let summary = store.import_dataset(src, &remap, SystemClock.now_ms())?;
    emit(format, &summary, || render_import(&summary))
}

#[derive(Debug, Serialize)]
struct RoundScore {
    round: u32,
    samples: usize,
    feature_entropy: f64,
    label_entropy: f64,
    raw_hades: f64,
    norm_hades: f64,
}

fn round_scores(store: &Store, table: &EmbeddingTable, bins: usize) -> Result<Vec<RoundScore>> {
    let mut scores = Vec::new();
    for r in &store.ledger().rounds {
        let s = store.round_hades(r.round, table, bins).with_context(|| format!("round {}", r.round))?;
        scores.push(RoundScore {
            round: r.round,
            samples: store.round_samples(r.round).len(),
            feature_entropy: s.feature_entropy,
            label_entropy: s.label_entropy,
            raw_hades: s.harmonic,
            norm_hades: 0.0,
        });
    }
    let raw: Vec<f64> = scores.iter().map(|s| s.raw_hades).collect();
    for (s, n) in scores.iter_mut().zip(normalize_scores(&raw)) {
        s.norm_hades = n;
    }
    Ok(scores)
}

fn score(store: &Path, embeddings: &Path, bins: usize, format: Format) -> Result<()> {
    if bins == 0 {
        bail!("--bins must be at least 1");
    }
    let store = Store::open(store)?;
    let table = load_embeddings(embeddings)?;
    let scores = round_scores(&store, &table, bins)?;
    emit(format, &scores, || {
        let mut out = String::from("Round | Samples | F | L | raw-HaDES | norm-HaDES\n");
        for s in &scores {
            out.push_str(&format!(
                "{} | {} | {} | {} | {} | {}\n",
                s.round,
                s.samples,
                format_score(Some(s.feature_entropy)),
                format_score(Some(s.label_entropy)),
                format_score(Some(s.raw_hades)),
                format_score(Some(s.norm_hades)),
            ));
        }
        out
    })
}

fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        let is_txt = path.extension().is_some_and(|e| e == "txt");
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if is_txt && path.file_name().is_some_and(|n| n != "classes.txt") {
            files.insert(stem.to_string(), path.clone());
        }
    }
    Ok(files)
}

fn eval(pred_dir: &Path, gt_dir: &Path, iou: f64, classes: Option<&Path>, format: Format) -> Result<()> {
    let classes = classes.map(Path::to_path_buf).unwrap_or_else(|| gt_dir.join("classes.txt"));
    let class_map = if classes.is_file() {
        ClassMap::parse(&fs::read_to_string(&classes)?).with_context(|| classes.display().to_string())?
    } else {
        ClassMap::door_handle()
    };
    let mut gts = Vec::new();
    for (stem, path) in label_files(gt_dir)? {
        let boxes = parse_label_file(&fs::read_to_string(&path)?, &class_map).with_context(|| path.display().to_string())?;
        gts.push(GroundTruthScene { sample_id: stem, boxes });
    }
    let mut preds = Vec::new();
    for (stem, path) in label_files(pred_dir)? {
        let detections = parse_prediction_file(&fs::read_to_string(&path)?, &class_map, "")
            .with_context(|| path.display().to_string())?;
        preds.push(DetectionScene { sample_id: stem, detections });
    }
    let result = map_at(&preds, &gts, &class_map, iou)?;
    emit(format, &result, || format!("{}\n", result.summary_line()))
}
