//! Replaying recorded client traffic through a [`Session`] with in-process
//! mock plugins and fixed timestamps.
//!
//! A trace is JSON lines, one client event each:
//!
//! ```text
//! {"ts":1000,"conn":1,"event":"connect"}
//! {"ts":1001,"conn":1,"event":"line","line":"{\"type\":\"hello\",...}"}
//! {"ts":1500,"conn":1,"event":"disconnect"}
//! ```
//!
//! Detector answers and trainer runs happen immediately, so the same trace
//! always produces the same store documents and the same outgoing lines.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use teachhub_core::annotations::ClassMap;
use teachhub_core::{Store, StoreError};

use crate::clock::ManualClock;
use crate::mock::{self, DetectorSource};
use crate::session::{ConnId, Effect, Event, Session, SessionOptions, TrainingReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceAction {
    Connect,
    Line { line: String },
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub ts: u64,
    pub conn: ConnId,
    #[serde(flatten)]
    pub action: TraceAction,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("trace line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub detector: DetectorSource,
    pub session: SessionOptions,
    pub class_map: ClassMap,
    /// Rounds (1-based attempt count) whose trainer run should fail.
    pub failing_attempts: Vec<usize>,
    pub embed: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            detector: DetectorSource::Seeded { seed: 0, classes: 2 },
            session: SessionOptions::default(),
            class_map: ClassMap::door_handle(),
            failing_attempts: Vec::new(),
            embed: true,
        }
    }
}

/// Everything a replay produced.
#[derive(Debug)]
pub struct ReplayOutcome {
    /// Lines the hub sent, in order, with their destination.
    pub sent: Vec<(ConnId, String)>,
    pub warnings: Vec<String>,
    pub trainer_runs: usize,
    pub store: Store,
}

/// Replays `trace` against a fresh store at `root`.
pub fn replay(trace: &[TraceEvent], root: &Path, options: ReplayOptions) -> Result<ReplayOutcome, StoreError> {
    let start = trace.first().map_or(0, |e| e.ts);
    let clock = Arc::new(ManualClock::new(start));
    let store = Store::init(root, options.class_map.clone(), None, start)?;
    let (mut session, startup) = Session::new(store, clock.clone(), options.session.clone())?;
    let mut driver = Driver { options, model_version: String::new(), sent: Vec::new(), warnings: Vec::new(), trainer_runs: 0 };
    let mut queue: VecDeque<Event> = driver.apply(startup).into();
    for event in trace {
        clock.set(event.ts);
        queue.push_back(match &event.action {
            TraceAction::Connect => Event::Connected(event.conn),
            TraceAction::Line { line } => Event::Line(event.conn, line.clone()),
            TraceAction::Disconnect => Event::Disconnected(event.conn),
        });
        while let Some(e) = queue.pop_front() {
            let effects = session.handle(e);
            queue.extend(driver.apply(effects));
        }
    }
    Ok(ReplayOutcome {
        sent: driver.sent,
        warnings: driver.warnings,
        trainer_runs: driver.trainer_runs,
        store: session.into_store(),
    })
}

struct Driver {
    options: ReplayOptions,
    model_version: String,
    sent: Vec<(ConnId, String)>,
    warnings: Vec<String>,
    trainer_runs: usize,
}

impl Driver {
    fn apply(&mut self, effects: Vec<Effect>) -> Vec<Event> {
        let mut follow = Vec::new();
        for effect in effects {
            match effect {
                Effect::Send(id, line) => self.sent.push((id, line)),
                Effect::Detect(line) => {
                    let reply = mock::detector_reply(&line, &self.options.detector, &self.model_version, 0);
                    follow.push(Event::DetectorLine(reply));
                }
                Effect::StartDetector { model_version, .. } => self.model_version = model_version,
                Effect::Train(job) => {
                    self.trainer_runs += 1;
                    let embeddings = self
                        .options
                        .embed
                        .then(|| mock::write_embeddings(&job.dataset, &job.embeddings_out).ok().map(|_| job.embeddings_out.clone()))
                        .flatten();
                    let result = if self.options.failing_attempts.contains(&self.trainer_runs) {
                        Err("trainer exited with exit status: 1".to_string())
                    } else {
                        mock::train(&job.dataset, &job.base_weights, &job.out_weights).map_err(|e| e.to_string())
                    };
                    follow.push(Event::TrainingFinished(TrainingReport { round: job.round, result, embeddings }));
                }
                Effect::Warn(w) => self.warnings.push(w),
            }
        }
        follow
    }
}

/// The three store documents, for byte comparison.
pub fn store_documents(root: &Path) -> std::io::Result<[(String, Vec<u8>); 3]> {
    let read = |rel: &str| fs::read(root.join(rel)).map(|b| (rel.to_string(), b));
    Ok([read("manifest.json")?, read("rounds.json")?, read("models/registry.json")?])
}
