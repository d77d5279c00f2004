//! On-disk dataset and model store.
//!
//! ```text
//! <root>/
//!   images/<sample_id>.png
//!   labels/<sample_id>.txt
//!   models/<version>/weights.bin
//!   models/registry.json
//!   manifest.json
//!   rounds.json
//! ```
//!
//! Every JSON document is replaced with write-temp-then-rename, so a crash
//! leaves either the old or the new document, plus possibly a stray `*.tmp`
//! file that [`Store::open`] moves into `quarantine/`. A store is held by one
//! writer at a time through an exclusive lock on `<root>/.lock`.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotations::{
    parse_label_file, remap_classes, serialize_label_file, AnnotationError, ClassMap, ClassRemap, NormalizedBox,
};
use crate::diversity::{DiversityError, EmbeddingTable, FeatureSet, HadesScore, LabelSet};

pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const ROUNDS: &str = "rounds.json";
const REGISTRY: &str = "models/registry.json";
const LOCK: &str = ".lock";
const QUARANTINE: &str = "quarantine";
const CLASSES_FILE: &str = "classes.txt";
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} is not empty")]
    RootNotEmpty(PathBuf),
    #[error("{0} is not an initialized store")]
    NotAStore(PathBuf),
    #[error("store at {0} is locked by another process")]
    StoreLocked(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("frame `{0}` was already saved")]
    DuplicateFrame(String),
    #[error("no pending samples")]
    EmptyPendingPool,
    #[error("round {0} is in progress")]
    RoundInProgress(u32),
    #[error("round {0} is not awaiting a result")]
    UnknownRound(u32),
    #[error("round {0} already has a result")]
    AlreadyRecorded(u32),
    #[error("unknown parent model `{0}`")]
    UnknownParent(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("{}: {source}", file.display())]
    Label {
        file: PathBuf,
        #[source]
        source: AnnotationError,
    },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("no embedding for sample `{0}`")]
    MissingEmbedding(String),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error("invalid dataset layout: {0}")]
    Layout(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Which round a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoundAssignment {
    /// Saved but not yet part of a fine-tuning round.
    Pending,
    /// Imported base data, never counted as newly collected.
    Base,
    Round(u32),
}

impl Serialize for RoundAssignment {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RoundAssignment::Pending => s.serialize_str("pending"),
            RoundAssignment::Base => s.serialize_str("base"),
            RoundAssignment::Round(r) => s.serialize_u32(*r),
        }
    }
}

impl<'de> Deserialize<'de> for RoundAssignment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(de::Error::custom("rounds start at 1")),
            Raw::Num(r) => Ok(RoundAssignment::Round(r)),
            Raw::Text(t) if t == "pending" => Ok(RoundAssignment::Pending),
            Raw::Text(t) if t == "base" => Ok(RoundAssignment::Base),
            Raw::Text(t) => Err(de::Error::custom(format!("unknown round assignment `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub source_frame_id: String,
    pub saved_at: u64,
    pub round_assigned: RoundAssignment,
    pub image_path: String,
    pub label_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub class_map: ClassMap,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainerOutcome {
    Success,
    Failure { detail: String },
}

impl TrainerOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, TrainerOutcome::Success)
    }
}

/// One fine-tuning round (or failed attempt at one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub newly_collected: u32,
    pub overall_collected: u32,
    /// Harmonic score in nats; `None` when no embeddings were available.
    pub raw_hades: Option<f64>,
    pub trainer_outcome: TrainerOutcome,
    pub started_at: u64,
    pub finished_at: u64,
    pub produced_model: Option<String>,
}

/// A snapshotted round still waiting for its trainer result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenRound {
    pub round: u32,
    pub sample_ids: Vec<String>,
    pub started_at: u64,
}

/// Contents of `rounds.json`. `rounds` holds successful rounds only, numbered
/// 1, 2, 3, ...; failed attempts are kept separately and do not consume a
/// round number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub rounds: Vec<RoundRecord>,
    pub failed_attempts: Vec<RoundRecord>,
    pub open_round: Option<OpenRound>,
}

impl RoundLedger {
    pub fn overall_collected(&self) -> u32 {
        self.rounds.last().map_or(0, |r| r.overall_collected)
    }

    pub fn next_round(&self) -> u32 {
        self.rounds.last().map_or(1, |r| r.round + 1)
    }

    /// Problems with numbering or the cumulative count identity.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut overall = 0u32;
        for (i, r) in self.rounds.iter().enumerate() {
            if r.round as usize != i + 1 {
                problems.push(format!("round at position {} is numbered {}", i + 1, r.round));
            }
            overall += r.newly_collected;
            if r.overall_collected != overall {
                problems.push(format!(
                    "round {}: overall_collected {} != cumulative {}",
                    r.round, r.overall_collected, overall
                ));
            }
            if !r.trainer_outcome.is_success() {
                problems.push(format!("round {} is listed as successful but failed", r.round));
            }
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelOrigin {
    Initial,
    Round(u32),
}

impl Serialize for ModelOrigin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ModelOrigin::Initial => s.serialize_str("initial"),
            ModelOrigin::Round(r) => s.serialize_u32(*r),
        }
    }
}

impl<'de> Deserialize<'de> for ModelOrigin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(ModelOrigin::Round(r)),
            Raw::Text(t) if t == "initial" => Ok(ModelOrigin::Initial),
            Raw::Text(t) => Err(de::Error::custom(format!("unknown model origin `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version: String,
    pub parent: Option<String>,
    pub created_at: u64,
    pub weights_path: String,
    pub produced_by_round: ModelOrigin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub current: Option<String>,
    pub versions: Vec<ModelVersion>,
}

impl Registry {
    pub fn get(&self, version: &str) -> Option<&ModelVersion> {
        self.versions.iter().find(|v| v.version == version)
    }

    pub fn current(&self) -> Option<&ModelVersion> {
        self.current.as_deref().and_then(|c| self.get(c))
    }

    /// Versions from the root to `version`, following parent links.
    pub fn lineage(&self, version: &str) -> Vec<String> {
        let mut chain = Vec::new();
        let mut seen = HashSet::new();
        let mut cursor = self.get(version);
        while let Some(v) = cursor {
            if !seen.insert(v.version.as_str()) {
                break;
            }
            chain.push(v.version.clone());
            cursor = v.parent.as_deref().and_then(|p| self.get(p));
        }
        chain.reverse();
        chain
    }

    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.versions.is_empty() {
            if self.current.is_some() {
                problems.push("current set on an empty registry".into());
            }
            return problems;
        }
        let roots = self.versions.iter().filter(|v| v.parent.is_none()).count();
        if roots != 1 {
            problems.push(format!("expected exactly one root version, found {roots}"));
        }
        for v in &self.versions {
            if let Some(p) = &v.parent {
                if self.get(p).is_none() {
                    problems.push(format!("{} has unknown parent {p}", v.version));
                }
            }
            let lineage = self.lineage(&v.version);
            let root_ok = lineage.first().and_then(|r| self.get(r)).is_some_and(|r| r.parent.is_none());
            if !root_ok {
                problems.push(format!("{} is not reachable from the root", v.version));
            }
        }
        match &self.current {
            Some(c) if self.get(c).is_none() => problems.push(format!("current {c} is not registered")),
            None => problems.push("no current version".into()),
            _ => {}
        }
        problems
    }
}

/// Counts reported after an import, in the store's class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub images: usize,
    pub images_with_boxes: usize,
    pub boxes_per_class: Vec<(String, usize)>,
}

/// Result of comparing the documents with the files on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub problems: Vec<String>,
    /// Files on disk no document refers to, e.g. left by an interrupted save.
    pub orphans: Vec<String>,
    pub quarantined: Vec<String>,
}

impl VerifyReport {
    pub fn is_consistent(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent() {
        // directory fsync is best effort; not every platform allows opening a dir
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("store documents serialize");
    out.push(b'\n');
    out
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

/// Handle on an open, locked store.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    manifest: Manifest,
    ledger: RoundLedger,
    registry: Registry,
    quarantined: Vec<String>,
    _lock: File,
}

impl Store {
    /// Creates a store in an empty or missing directory. With `initial_weights`
    /// the registry starts with `v0` as current.
    pub fn init(
        root: &Path,
        class_map: ClassMap,
        initial_weights: Option<&[u8]>,
        now_ms: u64,
    ) -> Result<Self, StoreError> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(io_err(root))?;
            if entries.next().is_some() {
                return Err(StoreError::RootNotEmpty(root.to_path_buf()));
            }
        }
        for dir in ["images", "labels", "models"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let lock = acquire_lock(root)?;
        let mut store = Store {
            root: root.to_path_buf(),
            manifest: Manifest { schema_version: SCHEMA_VERSION, class_map, samples: Vec::new() },
            ledger: RoundLedger::default(),
            registry: Registry::default(),
            quarantined: Vec::new(),
            _lock: lock,
        };
        store.persist_manifest()?;
        store.persist_ledger()?;
        store.persist_registry()?;
        write_atomic(&root.join(CLASSES_FILE), store.class_map().to_text().as_bytes())?;
        if let Some(blob) = initial_weights {
            store.register_model(blob, None, ModelOrigin::Initial, now_ms)?;
        }
        Ok(store)
    }

    /// Opens an existing store, quarantining leftover temp files and returning
    /// samples of unrecorded rounds to the pending pool.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        if !root.join(MANIFEST).is_file() {
            return Err(StoreError::NotAStore(root.to_path_buf()));
        }
        let lock = acquire_lock(root)?;
        let quarantined = quarantine_temp_files(root)?;
        let manifest: Manifest = read_json(&root.join(MANIFEST))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(StoreError::Corrupt {
                path: root.join(MANIFEST),
                reason: format!("unsupported schema_version {}", manifest.schema_version),
            });
        }
        let ledger: RoundLedger = read_json(&root.join(ROUNDS))?;
        let registry: Registry = read_json(&root.join(REGISTRY))?;
        let mut store = Store { root: root.to_path_buf(), manifest, ledger, registry, quarantined, _lock: lock };
        store.release_orphaned_assignments()?;
        Ok(store)
    }

    // A crash between the ledger and manifest writes can leave samples tagged
    // with a round that neither succeeded nor is open.
    fn release_orphaned_assignments(&mut self) -> Result<(), StoreError> {
        let mut live: BTreeSet<u32> = self.ledger.rounds.iter().map(|r| r.round).collect();
        if let Some(open) = &self.ledger.open_round {
            live.insert(open.round);
        }
        let mut changed = false;
        for s in &mut self.manifest.samples {
            if let RoundAssignment::Round(r) = s.round_assigned {
                if !live.contains(&r) {
                    s.round_assigned = RoundAssignment::Pending;
                    changed = true;
                }
            }
        }
        if changed {
            self.persist_manifest()?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ledger(&self) -> &RoundLedger {
        &self.ledger
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.manifest.class_map
    }

    /// Temp files moved aside when the store was opened.
    pub fn quarantined(&self) -> &[String] {
        &self.quarantined
    }

    pub fn pending_count(&self) -> usize {
        self.samples_where(RoundAssignment::Pending).count()
    }

    pub fn overall_collected(&self) -> u32 {
        self.ledger.overall_collected()
    }

    /// Number the next snapshot will get.
    pub fn next_round(&self) -> u32 {
        self.ledger.next_round()
    }

    pub fn has_frame(&self, source_frame_id: &str) -> bool {
        self.manifest.samples.iter().any(|s| s.source_frame_id == source_frame_id)
    }

    pub fn samples_where(&self, assignment: RoundAssignment) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.samples.iter().filter(move |s| s.round_assigned == assignment)
    }

    pub fn current_model(&self) -> Option<&ModelVersion> {
        self.registry.current()
    }

    pub fn weights_path(&self, version: &ModelVersion) -> PathBuf {
        self.root.join(&version.weights_path)
    }

    pub fn read_labels(&self, sample: &SampleRecord) -> Result<Vec<NormalizedBox>, StoreError> {
        let path = self.root.join(&sample.label_path);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_label_file(&text, self.class_map()).map_err(|source| StoreError::Label { file: path, source })
    }

    /// Saves an annotated frame as a pending sample.
    pub fn add_sample(
        &mut self,
        image_bytes: &[u8],
        boxes: &[NormalizedBox],
        source_frame_id: &str,
        now_ms: u64,
    ) -> Result<SampleRecord, StoreError> {
        let boxes = boxes
            .iter()
            .map(|b| b.validated(self.class_map()))
            .collect::<Result<Vec<_>, _>>()?;
        self.insert_sample(image_bytes, "png", &boxes, source_frame_id, RoundAssignment::Pending, now_ms)
    }

    fn insert_sample(
        &mut self,
        image_bytes: &[u8],
        extension: &str,
        boxes: &[NormalizedBox],
        source_frame_id: &str,
        assignment: RoundAssignment,
        now_ms: u64,
    ) -> Result<SampleRecord, StoreError> {
        if self.has_frame(source_frame_id) {
            return Err(StoreError::DuplicateFrame(source_frame_id.to_string()));
        }
        let sample_id = format!("s{:06}", self.manifest.samples.len() + 1);
        let record = SampleRecord {
            image_path: format!("images/{sample_id}.{extension}"),
            label_path: format!("labels/{sample_id}.txt"),
            sample_id,
            source_frame_id: source_frame_id.to_string(),
            saved_at: now_ms,
            round_assigned: assignment,
        };
        write_atomic(&self.root.join(&record.image_path), image_bytes)?;
        write_atomic(&self.root.join(&record.label_path), serialize_label_file(boxes).as_bytes())?;
        self.manifest.samples.push(record.clone());
        if let Err(e) = self.persist_manifest() {
            self.manifest.samples.pop();
            return Err(e);
        }
        Ok(record)
    }

    /// Moves every pending sample into the next round.
    pub fn snapshot_round(&mut self, now_ms: u64) -> Result<(u32, Vec<SampleRecord>), StoreError> {
        if let Some(open) = &self.ledger.open_round {
            return Err(StoreError::RoundInProgress(open.round));
        }
        let round = self.next_round();
        let ids: Vec<String> = self.samples_where(RoundAssignment::Pending).map(|s| s.sample_id.clone()).collect();
        if ids.is_empty() {
            return Err(StoreError::EmptyPendingPool);
        }
        self.ledger.open_round = Some(OpenRound { round, sample_ids: ids, started_at: now_ms });
        self.persist_ledger()?;
        let mut taken = Vec::new();
        for s in &mut self.manifest.samples {
            if s.round_assigned == RoundAssignment::Pending {
                s.round_assigned = RoundAssignment::Round(round);
                taken.push(s.clone());
            }
        }
        self.persist_manifest()?;
        Ok((round, taken))
    }

    /// Closes the open round. On failure its samples go back to pending and the
    /// round number stays available for the next snapshot.
    pub fn record_round_result(
        &mut self,
        round: u32,
        raw_hades: Option<f64>,
        outcome: TrainerOutcome,
        produced_model: Option<String>,
        now_ms: u64,
    ) -> Result<RoundRecord, StoreError> {
        let open = match &self.ledger.open_round {
            Some(open) if open.round == round => open.clone(),
            _ if self.ledger.rounds.iter().any(|r| r.round == round) => {
                return Err(StoreError::AlreadyRecorded(round));
            }
            _ => return Err(StoreError::UnknownRound(round)),
        };
        if let Some(v) = &produced_model {
            if self.registry.get(v).is_none() {
                return Err(StoreError::UnknownModel(v.clone()));
            }
        }
        let newly = open.sample_ids.len() as u32;
        let previous = self.ledger.overall_collected();
        let success = outcome.is_success();
        let record = RoundRecord {
            round,
            newly_collected: newly,
            overall_collected: if success { previous + newly } else { previous },
            raw_hades,
            trainer_outcome: outcome,
            started_at: open.started_at,
            finished_at: now_ms,
            produced_model: if success { produced_model } else { None },
        };
        self.ledger.open_round = None;
        if success {
            self.ledger.rounds.push(record.clone());
        } else {
            self.ledger.failed_attempts.push(record.clone());
        }
        self.persist_ledger()?;
        if !success {
            for s in &mut self.manifest.samples {
                if s.round_assigned == RoundAssignment::Round(round) {
                    s.round_assigned = RoundAssignment::Pending;
                }
            }
            self.persist_manifest()?;
        }
        Ok(record)
    }

    /// Stores a weights blob as the next version and makes it current.
    pub fn register_model(
        &mut self,
        weights: &[u8],
        parent: Option<&str>,
        origin: ModelOrigin,
        now_ms: u64,
    ) -> Result<ModelVersion, StoreError> {
        if let Some(p) = parent {
            if self.registry.get(p).is_none() {
                return Err(StoreError::UnknownParent(p.to_string()));
            }
        } else if !self.registry.versions.is_empty() {
            return Err(StoreError::UnknownParent("<none>".into()));
        }
        let version = format!("v{}", self.registry.versions.len());
        let dir = self.root.join("models").join(&version);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let weights_path = format!("models/{version}/weights.bin");
        write_atomic(&self.root.join(&weights_path), weights)?;
        let record = ModelVersion {
            version: version.clone(),
            parent: parent.map(str::to_string),
            created_at: now_ms,
            weights_path,
            produced_by_round: origin,
        };
        self.registry.versions.push(record.clone());
        self.registry.current = Some(version);
        self.persist_registry()?;
        Ok(record)
    }

    /// Samples of a recorded or open round.
    pub fn round_samples(&self, round: u32) -> Vec<&SampleRecord> {
        self.samples_where(RoundAssignment::Round(round)).collect()
    }

    /// Class names of every box saved in `round`.
    pub fn round_labels(&self, round: u32) -> Result<LabelSet, StoreError> {
        let mut labels = LabelSet::default();
        for s in self.round_samples(round) {
            for b in self.read_labels(s)? {
                labels.push(self.class_map().name(b.class_id).unwrap_or("?"));
            }
        }
        Ok(labels)
    }

    /// Unnormalized score of a round's samples from precomputed embeddings.
    pub fn round_hades(&self, round: u32, embeddings: &EmbeddingTable, bins: usize) -> Result<HadesScore, StoreError> {
        let samples = self.round_samples(round);
        if samples.is_empty() {
            return Err(StoreError::UnknownRound(round));
        }
        let vectors = samples
            .iter()
            .map(|s| {
                embeddings
                    .get(&s.sample_id)
                    .cloned()
                    .ok_or_else(|| StoreError::MissingEmbedding(s.sample_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let features = FeatureSet::new(vectors)?;
        Ok(HadesScore::compute(&features, &self.round_labels(round)?, bins)?)
    }

    /// Copies a YOLO-layout dataset (`images/`, `labels/`, `classes.txt`) into
    /// the store as base data, relabeling through `remap`. Names the remap
    /// does not mention keep their own name. Nothing is written unless every
    /// label file parses.
    pub fn import_dataset(&mut self, src: &Path, remap: &ClassRemap, now_ms: u64) -> Result<ImportSummary, StoreError> {
        let classes_path = src.join(CLASSES_FILE);
        let classes_text = fs::read_to_string(&classes_path).map_err(io_err(&classes_path))?;
        let src_map = ClassMap::parse(&classes_text)
            .map_err(|source| StoreError::Label { file: classes_path.clone(), source })?;
        let remap = ClassRemap::identity(&src_map).merged(remap);

        let images_dir = src.join("images");
        let mut images: Vec<PathBuf> = fs::read_dir(&images_dir)
            .map_err(io_err(&images_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && image_extension(p).is_some())
            .collect();
        images.sort();

        let mut staged = Vec::with_capacity(images.len());
        for image in images {
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| StoreError::Layout(format!("non-UTF-8 file name {}", image.display())))?
                .to_string();
            let label_path = src.join("labels").join(format!("{stem}.txt"));
            let text = if label_path.exists() {
                fs::read_to_string(&label_path).map_err(io_err(&label_path))?
            } else {
                String::new()
            };
            let label_err = |source| StoreError::Label { file: label_path.clone(), source };
            let boxes = parse_label_file(&text, &src_map).map_err(label_err)?;
            let boxes = remap_classes(&boxes, &src_map, &remap, self.class_map()).map_err(label_err)?;
            let frame_id = format!("import:{stem}");
            if self.has_frame(&frame_id) {
                return Err(StoreError::DuplicateFrame(frame_id));
            }
            staged.push((image, frame_id, boxes));
        }

        let mut per_class = vec![0usize; self.class_map().len()];
        let mut with_boxes = 0;
        let count = staged.len();
        for (image, frame_id, boxes) in staged {
            let bytes = fs::read(&image).map_err(io_err(&image))?;
            let ext = image_extension(&image).unwrap_or("png").to_string();
            for b in &boxes {
                per_class[b.class_id as usize] += 1;
            }
            with_boxes += usize::from(!boxes.is_empty());
            self.insert_sample(&bytes, &ext, &boxes, &frame_id, RoundAssignment::Base, now_ms)?;
        }
        Ok(ImportSummary {
            images: count,
            images_with_boxes: with_boxes,
            boxes_per_class: self.class_map().names().iter().cloned().zip(per_class).collect(),
        })
    }

    /// Writes every sample out as a YOLO-layout dataset, named by sample id.
    pub fn export_dataset(&self, dst: &Path) -> Result<usize, StoreError> {
        for dir in ["images", "labels"] {
            let p = dst.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let classes = dst.join(CLASSES_FILE);
        fs::write(&classes, self.class_map().to_text()).map_err(io_err(&classes))?;
        for s in &self.manifest.samples {
            for rel in [&s.image_path, &s.label_path] {
                let from = self.root.join(rel);
                let to = dst.join(rel);
                fs::copy(&from, &to).map_err(io_err(&from))?;
            }
        }
        Ok(self.manifest.samples.len())
    }

    /// Cross-checks documents against the files on disk.
    pub fn verify(&self) -> VerifyReport {
        let mut report = VerifyReport { quarantined: self.quarantined.clone(), ..Default::default() };
        let mut referenced: HashSet<String> = HashSet::new();
        let mut ids = HashSet::new();
        for s in &self.manifest.samples {
            if !ids.insert(&s.sample_id) {
                report.problems.push(format!("duplicate sample id {}", s.sample_id));
            }
            for rel in [&s.image_path, &s.label_path] {
                referenced.insert(rel.clone());
                if !self.root.join(rel).is_file() {
                    report.problems.push(format!("{}: missing {rel}", s.sample_id));
                }
            }
            if self.root.join(&s.label_path).is_file() {
                if let Err(e) = self.read_labels(s) {
                    report.problems.push(format!("{}: {e}", s.sample_id));
                }
            }
        }
        report.problems.extend(self.ledger.check());
        if let Some(open) = &self.ledger.open_round {
            for id in &open.sample_ids {
                let tagged = self
                    .manifest
                    .samples
                    .iter()
                    .any(|s| &s.sample_id == id && s.round_assigned == RoundAssignment::Round(open.round));
                if !tagged {
                    report.problems.push(format!("open round {} lists {id} but the manifest disagrees", open.round));
                }
            }
        }
        for r in &self.ledger.rounds {
            let n = self.round_samples(r.round).len() as u32;
            if n != r.newly_collected {
                report
                    .problems
                    .push(format!("round {}: ledger says {} samples, manifest has {n}", r.round, r.newly_collected));
            }
        }
        report.problems.extend(self.registry.check());
        for v in &self.registry.versions {
            referenced.insert(v.weights_path.clone());
            if !self.root.join(&v.weights_path).is_file() {
                report.problems.push(format!("{}: missing {}", v.version, v.weights_path));
            }
        }
        for dir in ["images", "labels"] {
            if let Ok(entries) = fs::read_dir(self.root.join(dir)) {
                let mut names: Vec<String> = entries
                    .filter_map(|e| e.ok())
                    .filter_map(|e| e.file_name().to_str().map(|n| format!("{dir}/{n}")))
                    .filter(|rel| !referenced.contains(rel))
                    .collect();
                names.sort();
                report.orphans.extend(names);
            }
        }
        report
    }

    fn persist_manifest(&self) -> Result<(), StoreError> {
        write_atomic(&self.root.join(MANIFEST), &to_json(&self.manifest))
    }

    fn persist_ledger(&self) -> Result<(), StoreError> {
        write_atomic(&self.root.join(ROUNDS), &to_json(&self.ledger))
    }

    fn persist_registry(&self) -> Result<(), StoreError> {
        write_atomic(&self.root.join(REGISTRY), &to_json(&self.registry))
    }
}

fn image_extension(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    IMAGE_EXTENSIONS.iter().copied().find(|e| *e == ext)
}

fn acquire_lock(root: &Path) -> Result<File, StoreError> {
    let path = root.join(LOCK);
    let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(StoreError::StoreLocked(root.to_path_buf())),
        Err(TryLockError::Error(source)) => Err(StoreError::Io { path, source }),
    }
}

fn quarantine_temp_files(root: &Path) -> Result<Vec<String>, StoreError> {
    let mut moved = Vec::new();
    for dir in [root.to_path_buf(), root.join("images"), root.join("labels"), root.join("models")] {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut temps: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "tmp"))
            .collect();
        temps.sort();
        for tmp in temps {
            let rel = tmp.strip_prefix(root).unwrap_or(&tmp).to_string_lossy().replace(['/', '\\'], "_");
            let qdir = root.join(QUARANTINE);
            fs::create_dir_all(&qdir).map_err(io_err(&qdir))?;
            let target = qdir.join(&rel);
            fs::rename(&tmp, &target).map_err(io_err(&tmp))?;
            moved.push(format!("{QUARANTINE}/{rel}"));
        }
    }
    Ok(moved)
}
