//! The hub's state machine.
//!
//! [`Session`] is synchronous and owns the store. It consumes [`Event`]s
//! (client lines, detector output, trainer completion) one at a time and
//! answers with [`Effect`]s for the caller to carry out: lines to send,
//! frames to hand to the detector, training jobs to launch. The network
//! server and the trace replayer both drive it the same way.
//!
//! Mode moves Collecting(r) → Training(r) → Collecting(r + 1) when the trainer
//! succeeds and back to Collecting(r) when it fails.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Arc;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as BASE64;
use image::{ImageFormat, ImageReader};
use teachhub_core::datastore::{ModelOrigin, RoundAssignment, StoreError, TrainerOutcome};
use teachhub_core::diversity::load_embeddings;
use teachhub_core::Store;

use crate::clock::Clock;
use crate::config::DEFAULT_CACHE_BOUND;
use crate::protocol::{
    decode, validate_boxes, Annotation, ClientRole, Envelope, ErrorCode, Frame, Message, ModeName, ModelUpdated,
    PredictedBox, Predictions, RoundStatus, RoundStatusBody, SaveAck, Sip, PNG_BASE64,
};

pub type ConnId = u64;

/// File the embedder plugin writes, relative to the store root.
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
const STAGING_DIR: &str = "staging";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Collecting(u32),
    Training(u32),
}

impl Mode {
    pub fn round(self) -> u32 {
        match self {
            Mode::Collecting(r) | Mode::Training(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Connected(ConnId),
    Line(ConnId, String),
    Disconnected(ConnId),
    /// One line from the detector's stdout.
    DetectorLine(String),
    /// The detector could not be reached or exited.
    DetectorFailed(String),
    TrainingFinished(TrainingReport),
}

/// Paths handed to the trainer (and embedder) for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingJob {
    pub round: u32,
    pub dataset: PathBuf,
    pub base_weights: PathBuf,
    pub out_weights: PathBuf,
    pub embeddings_out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub round: u32,
    /// `Err` carries a human-readable reason (exit status, missing output).
    pub result: Result<(), String>,
    /// Embedding table written for this round, if an embedder ran and succeeded.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send(ConnId, String),
    /// A frame line for the detector's stdin.
    Detect(String),
    Train(TrainingJob),
    /// (Re)start the detector on these weights.
    StartDetector { weights: PathBuf, model_version: String },
    /// Something worth a warning in the log; nothing was sent to anyone.
    Warn(String),
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub cache_bound: usize,
    pub bins: usize,
    /// Registered as `v0` if the store has no model yet.
    pub initial_weights: Vec<u8>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { cache_bound: DEFAULT_CACHE_BOUND, bins: teachhub_core::DEFAULT_BINS, initial_weights: Vec::new() }
    }
}

#[derive(Debug)]
struct Conn {
    role: Option<ClientRole>,
    name: String,
    next_seq: u64,
}

#[derive(Debug)]
struct CachedFrame {
    frame: Frame,
    png: Vec<u8>,
    source: ConnId,
    source_seq: u64,
}

pub struct Session {
    store: Store,
    clock: Arc<dyn Clock>,
    options: SessionOptions,
    mode: Mode,
    cache: VecDeque<CachedFrame>,
    conns: BTreeMap<ConnId, Conn>,
    detector_seq: u64,
    last_raw_hades: Option<f64>,
}

impl Session {
    /// Takes over an open store. A round left open by a previous run is
    /// recorded as failed so its samples return to the pending pool. Returns
    /// the effects that start the detector.
    pub fn new(mut store: Store, clock: Arc<dyn Clock>, options: SessionOptions) -> Result<(Self, Vec<Effect>), StoreError> {
        let mut effects = Vec::new();
        if let Some(open) = store.ledger().open_round.clone() {
            let detail = "hub stopped before the trainer reported".to_string();
            store.record_round_result(open.round, None, TrainerOutcome::Failure { detail }, None, clock.now_ms())?;
            effects.push(Effect::Warn(format!("round {} was interrupted; its samples are pending again", open.round)));
        }
        if store.current_model().is_none() {
            store.register_model(&options.initial_weights, None, ModelOrigin::Initial, clock.now_ms())?;
        }
        let last_raw_hades = store.ledger().rounds.last().and_then(|r| r.raw_hades);
        let mode = Mode::Collecting(store.next_round());
        let session = Session {
            store,
            clock,
            options,
            mode,
            cache: VecDeque::new(),
            conns: BTreeMap::new(),
            detector_seq: 0,
            last_raw_hades,
        };
        effects.push(session.start_detector());
        Ok((session, effects))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    pub fn cached_frames(&self) -> usize {
        self.cache.len()
    }

    pub fn status(&self) -> RoundStatus {
        RoundStatus {
            mode: match self.mode {
                Mode::Collecting(_) => ModeName::Collecting,
                Mode::Training(_) => ModeName::Training,
            },
            round: self.mode.round(),
            pending_count: self.store.pending_count(),
            overall_collected: self.store.overall_collected(),
            raw_hades: self.last_raw_hades,
            model_version: self.store.current_model().map(|m| m.version.clone()),
        }
    }

    pub fn handle(&mut self, event: Event) -> Vec<Effect> {
        let mut out = Vec::new();
        match event {
            Event::Connected(id) => {
                self.conn(id);
            }
            Event::Disconnected(id) => {
                self.conns.remove(&id);
            }
            Event::Line(id, line) => self.on_line(id, &line, &mut out),
            Event::DetectorLine(line) => self.on_detector_line(&line, &mut out),
            Event::DetectorFailed(reason) => out.push(Effect::Warn(format!("detector failure: {reason}"))),
            Event::TrainingFinished(report) => self.on_training_finished(report, &mut out),
        }
        out
    }

    fn conn(&mut self, id: ConnId) -> &mut Conn {
        self.conns.entry(id).or_insert_with(|| Conn { role: None, name: String::new(), next_seq: 1 })
    }

    fn send(&mut self, id: ConnId, message: Message, out: &mut Vec<Effect>) {
        let ts = self.clock.now_ms();
        let Some(conn) = self.conns.get_mut(&id) else { return };
        let seq = conn.next_seq;
        conn.next_seq += 1;
        out.push(Effect::Send(id, Envelope::new(seq, ts, message).encode()));
    }

    fn broadcast(&mut self, roles: &[ClientRole], message: Message, out: &mut Vec<Effect>) {
        let targets: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.role.is_some_and(|r| roles.contains(&r)))
            .map(|(id, _)| *id)
            .collect();
        for id in targets {
            self.send(id, message.clone(), out);
        }
    }

    fn reply_error(&mut self, id: ConnId, code: ErrorCode, message: impl Into<String>, seq: Option<u64>, out: &mut Vec<Effect>) {
        self.send(id, Message::error(code, message, seq), out);
    }

    fn push_status(&mut self, out: &mut Vec<Effect>) {
        let status = Message::RoundStatus(RoundStatusBody::Status(self.status()));
        self.broadcast(&[ClientRole::Annotator, ClientRole::Observer], status, out);
    }

    fn start_detector(&self) -> Effect {
        let model = self.store.current_model().expect("a model is always registered");
        Effect::StartDetector { weights: self.store.weights_path(model), model_version: model.version.clone() }
    }

    fn on_line(&mut self, id: ConnId, line: &str, out: &mut Vec<Effect>) {
        self.conn(id);
        let env = match decode(line) {
            Ok(env) => env,
            Err(e) => return self.reply_error(id, e.code, e.message, e.seq, out),
        };
        let seq = Some(env.seq);
        let role = self.conns[&id].role;
        match (env.message, role) {
            (Message::Hello(hello), None) => {
                let role = match hello.role.as_str() {
                    "source" => ClientRole::Source,
                    "annotator" => ClientRole::Annotator,
                    "observer" => ClientRole::Observer,
                    "detector" => {
                        let msg = "the detector runs as a hub-managed process, not a network client";
                        return self.reply_error(id, ErrorCode::BadRole, msg, seq, out);
                    }
                    other => {
                        let msg = format!("unknown role `{other}`; expected source, annotator or observer");
                        return self.reply_error(id, ErrorCode::BadRole, msg, seq, out);
                    }
                };
                let conn = self.conn(id);
                conn.role = Some(role);
                conn.name = hello.name;
                let status = Message::RoundStatus(RoundStatusBody::Status(self.status()));
                self.send(id, status, out);
            }
            (Message::Hello(_), Some(role)) => {
                let msg = format!("connection already identified as {role}");
                self.reply_error(id, ErrorCode::AlreadyIdentified, msg, seq, out);
            }
            (msg, None) => {
                let msg = format!("send hello before `{}`", msg.type_name());
                self.reply_error(id, ErrorCode::HelloRequired, msg, seq, out);
            }
            (Message::Frame(frame), Some(ClientRole::Source)) => self.ingest_frame(id, env.seq, frame, out),
            (Message::Annotation(a), Some(ClientRole::Annotator)) => self.accept_annotation(id, env.seq, a, out),
            (Message::FinetuneRequest {}, Some(ClientRole::Annotator)) => self.request_finetune(id, env.seq, out),
            (Message::RoundStatus(_), Some(_)) => {
                let status = Message::RoundStatus(RoundStatusBody::Status(self.status()));
                self.send(id, status, out);
            }
            (msg, Some(role)) => {
                let msg = format!("`{}` is not accepted from a {role} connection", msg.type_name());
                self.reply_error(id, ErrorCode::BadRole, msg, seq, out);
            }
        }
    }

    fn ingest_frame(&mut self, id: ConnId, seq: u64, frame: Frame, out: &mut Vec<Effect>) {
        let png = match check_frame(&frame) {
            Ok(png) => png,
            Err(msg) => return self.reply_error(id, ErrorCode::MalformedFrame, msg, Some(seq), out),
        };
        if self.cache.iter().any(|c| c.frame.frame_id == frame.frame_id) || self.store.has_frame(&frame.frame_id) {
            let msg = format!("frame `{}` was already received", frame.frame_id);
            return self.reply_error(id, ErrorCode::DuplicateFrame, msg, Some(seq), out);
        }
        while self.cache.len() >= self.options.cache_bound {
            let evicted = self.cache.pop_front().expect("cache is nonempty");
            let msg = format!("frame `{}` evicted from the frame cache before it was annotated", evicted.frame.frame_id);
            if self.conns.contains_key(&evicted.source) {
                self.reply_error(evicted.source, ErrorCode::Backpressure, msg, Some(evicted.source_seq), out);
            } else {
                out.push(Effect::Warn(msg));
            }
        }
        self.detector_seq += 1;
        let line = Envelope::new(self.detector_seq, self.clock.now_ms(), Message::Frame(frame.clone())).encode();
        self.cache.push_back(CachedFrame { frame, png, source: id, source_seq: seq });
        out.push(Effect::Detect(line));
    }

    fn on_detector_line(&mut self, line: &str, out: &mut Vec<Effect>) {
        let predictions = match decode(line) {
            Ok(Envelope { message: Message::Predictions(p), .. }) => p,
            Ok(Envelope { message: Message::Error(e), .. }) => {
                return out.push(Effect::Warn(format!("detector failure: {}: {}", e.code, e.message)));
            }
            Ok(env) => {
                return out.push(Effect::Warn(format!("detector sent unexpected `{}`", env.message.type_name())));
            }
            Err(e) => return out.push(Effect::Warn(format!("detector sent an unreadable line: {e}"))),
        };
        let Predictions { frame_id, model_version, boxes } = predictions;
        let Some(cached) = self.cache.iter().find(|c| c.frame.frame_id == frame_id) else {
            return out.push(Effect::Warn(format!("UnknownFrame: predictions for `{frame_id}` dropped")));
        };
        let class_map = self.store.class_map();
        let mut kept = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.into_iter().enumerate() {
            match b.to_box().validated(class_map) {
                Ok(v) if b.confidence.is_finite() => kept.push(PredictedBox {
                    class_id: v.class_id,
                    class_name: class_map.name(v.class_id).unwrap_or_default().to_string(),
                    cx: v.cx,
                    cy: v.cy,
                    w: v.w,
                    h: v.h,
                    confidence: b.confidence,
                }),
                Ok(_) => out.push(Effect::Warn(format!("frame `{frame_id}`: prediction {i} has a non-finite confidence"))),
                Err(e) => out.push(Effect::Warn(format!("frame `{frame_id}`: prediction {i} dropped: {e}"))),
            }
        }
        let sip = Sip {
            frame_id,
            width: cached.frame.width,
            height: cached.frame.height,
            data: cached.frame.data.clone(),
            model_version,
            boxes: kept,
        };
        self.broadcast(&[ClientRole::Annotator, ClientRole::Observer], Message::Sip(sip), out);
    }

    fn accept_annotation(&mut self, id: ConnId, seq: u64, annotation: Annotation, out: &mut Vec<Effect>) {
        let seq = Some(seq);
        let frame_id = annotation.frame_id;
        if self.store.has_frame(&frame_id) {
            let msg = format!("frame `{frame_id}` was already saved");
            return self.reply_error(id, ErrorCode::DuplicateFrame, msg, seq, out);
        }
        let Some(pos) = self.cache.iter().position(|c| c.frame.frame_id == frame_id) else {
            let msg = format!("frame `{frame_id}` is not in the frame cache");
            return self.reply_error(id, ErrorCode::UnknownFrame, msg, seq, out);
        };
        let boxes = match validate_boxes(&annotation.boxes, self.store.class_map()) {
            Ok(b) => b,
            Err(msg) => return self.reply_error(id, ErrorCode::InvalidBoxes, msg, seq, out),
        };
        let now = self.clock.now_ms();
        let record = match self.store.add_sample(&self.cache[pos].png, &boxes, &frame_id, now) {
            Ok(r) => r,
            Err(StoreError::DuplicateFrame(f)) => {
                return self.reply_error(id, ErrorCode::DuplicateFrame, format!("frame `{f}` was already saved"), seq, out);
            }
            Err(e) => return self.reply_error(id, ErrorCode::Internal, format!("saving failed: {e}"), seq, out),
        };
        debug_assert_eq!(record.round_assigned, RoundAssignment::Pending);
        self.cache.remove(pos);
        let ack = SaveAck {
            frame_id,
            sample_id: record.sample_id,
            round: self.mode.round(),
            pending_count: self.store.pending_count(),
            overall_collected: self.store.overall_collected(),
        };
        self.broadcast(&[ClientRole::Annotator], Message::SaveAck(ack), out);
        self.push_status(out);
    }

    fn request_finetune(&mut self, id: ConnId, seq: u64, out: &mut Vec<Effect>) {
        let seq = Some(seq);
        if let Mode::Training(r) = self.mode {
            self.reply_error(id, ErrorCode::AlreadyTraining, format!("round {r} is already training"), seq, out);
            let status = Message::RoundStatus(RoundStatusBody::Status(self.status()));
            return self.send(id, status, out);
        }
        let base_weights = match self.store.current_model() {
            Some(m) => self.store.weights_path(m),
            None => return self.reply_error(id, ErrorCode::Internal, "no current model", seq, out),
        };
        let staging = self.store.root().join(STAGING_DIR);
        if let Err(e) = fs::create_dir_all(&staging) {
            let msg = format!("cannot create {}: {e}", staging.display());
            return self.reply_error(id, ErrorCode::Internal, msg, seq, out);
        }
        let round = match self.store.snapshot_round(self.clock.now_ms()) {
            Ok((round, _)) => round,
            Err(StoreError::EmptyPendingPool) => {
                return self.reply_error(id, ErrorCode::EmptyPendingPool, "no pending samples to train on", seq, out);
            }
            Err(e) => return self.reply_error(id, ErrorCode::Internal, format!("snapshot failed: {e}"), seq, out),
        };
        self.mode = Mode::Training(round);
        let job = TrainingJob {
            round,
            dataset: self.store.root().to_path_buf(),
            base_weights,
            out_weights: staging.join(format!("round-{round}.weights")),
            embeddings_out: self.store.root().join(EMBEDDINGS_FILE),
        };
        self.push_status(out);
        out.push(Effect::Train(job));
    }

    fn on_training_finished(&mut self, report: TrainingReport, out: &mut Vec<Effect>) {
        if self.mode != Mode::Training(report.round) {
            return out.push(Effect::Warn(format!("ignoring trainer result for round {} in {:?}", report.round, self.mode)));
        }
        let round = report.round;
        let now = self.clock.now_ms();
        let out_weights = self.store.root().join(STAGING_DIR).join(format!("round-{round}.weights"));
        let weights = report.result.and_then(|()| {
            fs::read(&out_weights).map_err(|e| format!("trainer exited 0 but {} is unreadable: {e}", out_weights.display()))
        });
        let _ = fs::remove_file(&out_weights);
        let result = match weights {
            Ok(weights) => {
                let raw_hades = report.embeddings.and_then(|path| self.score_round(round, &path, out));
                self.finish_success(round, &weights, raw_hades, now)
            }
            Err(detail) => {
                out.push(Effect::Warn(format!("round {round} failed: {detail}")));
                self.store
                    .record_round_result(round, None, TrainerOutcome::Failure { detail }, None, now)
                    .map(|_| None)
            }
        };
        match result {
            Ok(Some(version)) => {
                self.mode = Mode::Collecting(round + 1);
                out.push(self.start_detector());
                let update = Message::ModelUpdated(ModelUpdated { model_version: version });
                self.broadcast(&[ClientRole::Annotator, ClientRole::Observer], update, out);
            }
            Ok(None) => self.mode = Mode::Collecting(round),
            Err(e) => {
                out.push(Effect::Warn(format!("could not record round {round}: {e}")));
                self.mode = Mode::Collecting(self.store.next_round());
            }
        }
        self.push_status(out);
    }

    fn finish_success(&mut self, round: u32, weights: &[u8], raw_hades: Option<f64>, now: u64) -> Result<Option<String>, StoreError> {
        let parent = self.store.current_model().map(|m| m.version.clone());
        let model = self.store.register_model(weights, parent.as_deref(), ModelOrigin::Round(round), now)?;
        self.store
            .record_round_result(round, raw_hades, TrainerOutcome::Success, Some(model.version.clone()), now)?;
        self.last_raw_hades = raw_hades;
        Ok(Some(model.version))
    }

    fn score_round(&self, round: u32, path: &std::path::Path, out: &mut Vec<Effect>) -> Option<f64> {
        let scored = load_embeddings(path)
            .map_err(StoreError::from)
            .and_then(|table| self.store.round_hades(round, &table, self.options.bins));
        match scored {
            Ok(score) => Some(score.harmonic),
            Err(e) => {
                out.push(Effect::Warn(format!("round {round} left unscored: {e}")));
                None
            }
        }
    }
}

/// Decodes the image of a frame message, checking it against its declared size.
pub fn check_frame(frame: &Frame) -> Result<Vec<u8>, String> {
    if frame.frame_id.is_empty() {
        return Err("frame_id is empty".into());
    }
    if frame.encoding != PNG_BASE64 {
        return Err(format!("unsupported encoding `{}`; expected `{PNG_BASE64}`", frame.encoding));
    }
    let png = BASE64.decode(frame.data.as_bytes()).map_err(|e| format!("data is not base64: {e}"))?;
    let (w, h) = ImageReader::with_format(Cursor::new(&png), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| format!("data is not a PNG image: {e}"))?;
    if (w, h) != (frame.width, frame.height) {
        return Err(format!("declared {}x{} but the image is {w}x{h}", frame.width, frame.height));
    }
    Ok(png)
}
