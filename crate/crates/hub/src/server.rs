//! The networked hub: TCP and WebSocket listeners feeding one actor task
//! that owns the [`Session`] and the plugin processes.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use teachhub_core::annotations::ClassMap;
use teachhub_core::{Store, StoreError};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::clock::{Clock, SystemClock};
use crate::config::HubConfig;
use crate::plugins::{run_training, Detector, DetectorOutput, PluginCommand};
use crate::session::{ConnId, Effect, Event, Session, SessionOptions};

/// Path of the WebSocket endpoint.
pub const WS_PATH: &str = "/ws";

#[derive(Debug, Error)]
pub enum HubError {
    #[error("cannot listen on {addr} (port {port}): {source}")]
    BindFailure {
        addr: String,
        port: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot start the {plugin} plugin `{command}`: {reason}")]
    PluginSpawnFailure { plugin: &'static str, command: String, reason: String },
    #[error("store at {} is locked by another process", .0.display())]
    StoreLocked(PathBuf),
    #[error("cannot read initial weights {}: {source}", path.display())]
    InitialWeights {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for HubError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StoreLocked(p) => HubError::StoreLocked(p),
            e => HubError::Store(e),
        }
    }
}

pub struct HubOptions {
    pub clock: Arc<dyn Clock>,
    /// Classes for a store created on startup.
    pub class_map: ClassMap,
}

impl Default for HubOptions {
    fn default() -> Self {
        Self { clock: Arc::new(SystemClock), class_map: ClassMap::door_handle() }
    }
}

/// What the hub did, returned on shutdown.
#[derive(Debug)]
pub struct HubSummary {
    pub trainer_runs: usize,
    pub store: Store,
}

pub struct HubHandle {
    tcp_addr: SocketAddr,
    ws_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    actor: JoinHandle<HubSummary>,
    listeners: Vec<JoinHandle<()>>,
}

impl HubHandle {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}{WS_PATH}", self.ws_addr)
    }

    /// Stops accepting clients, terminates plugins and releases the store.
    pub async fn shutdown(self) -> HubSummary {
        let _ = self.shutdown.send(true);
        let summary = self.actor.await.expect("hub actor panicked");
        for l in self.listeners {
            l.abort();
        }
        summary
    }
}

/// Opens the store at `root`, creating it if the directory is missing or empty.
pub fn open_or_init_store(root: &Path, class_map: ClassMap, now_ms: u64) -> Result<Store, StoreError> {
    if root.join("manifest.json").exists() {
        Store::open(root)
    } else {
        Store::init(root, class_map, None, now_ms)
    }
}

async fn bind(addr: &str) -> Result<TcpListener, HubError> {
    TcpListener::bind(addr).await.map_err(|source| HubError::BindFailure {
        addr: addr.to_string(),
        port: addr.rsplit(':').next().unwrap_or(addr).to_string(),
        source,
    })
}

fn plugin(plugin: &'static str, command: &str) -> Result<PluginCommand, HubError> {
    PluginCommand::resolve(plugin, command).map_err(|reason| HubError::PluginSpawnFailure {
        plugin,
        command: command.to_string(),
        reason,
    })
}

/// Starts the hub in the background.
pub async fn start_hub(config: &HubConfig, options: HubOptions) -> Result<HubHandle, HubError> {
    let detector_cmd = plugin("detector", &config.detector_cmd)?;
    let trainer_cmd = plugin("trainer", &config.trainer_cmd)?;
    let embedder_cmd = config.embedder_cmd.as_deref().map(|c| plugin("embedder", c)).transpose()?;
    let initial_weights = match &config.initial_weights {
        Some(path) => fs::read(path).map_err(|source| HubError::InitialWeights { path: path.clone(), source })?,
        None => Vec::new(),
    };

    let tcp = bind(&config.listen_tcp).await?;
    let ws = bind(&config.listen_ws).await?;
    let tcp_addr = tcp.local_addr().map_err(|source| HubError::BindFailure {
        addr: config.listen_tcp.clone(),
        port: String::new(),
        source,
    })?;
    let ws_addr = ws.local_addr().map_err(|source| HubError::BindFailure {
        addr: config.listen_ws.clone(),
        port: String::new(),
        source,
    })?;

    let store = open_or_init_store(&config.store_root, options.class_map, options.clock.now_ms())?;
    let session_options = SessionOptions { cache_bound: config.cache_bound, bins: config.bins, initial_weights };
    let (session, startup) = Session::new(store, options.clock, session_options)?;

    let (input_tx, input_rx) = mpsc::unbounded_channel();
    let (detector_tx, detector_rx) = mpsc::unbounded_channel();
    let mut actor = Actor {
        session,
        conns: BTreeMap::new(),
        detector: None,
        detector_cmd,
        detector_tx,
        trainer_cmd,
        embedder_cmd,
        training: None,
        trainer_runs: 0,
        input_tx: input_tx.clone(),
    };
    for effect in startup {
        match effect {
            Effect::StartDetector { weights, model_version } => actor.spawn_detector(&weights, &model_version)?,
            other => {
                actor.apply(vec![other]);
            }
        }
    }

    let (shutdown, shutdown_rx) = watch::channel(false);
    let next_id = Arc::new(AtomicU64::new(1));
    let tcp_task = tokio::spawn(accept_tcp(tcp, input_tx.clone(), next_id.clone()));
    let router = Router::new().route(WS_PATH, get(ws_upgrade)).with_state(WsState { input: input_tx, next_id });
    let ws_task = tokio::spawn(async move {
        if let Err(e) = axum::serve(ws, router).await {
            tracing::error!("websocket listener stopped: {e}");
        }
    });
    let actor = tokio::spawn(actor.run(input_rx, detector_rx, shutdown_rx));
    tracing::info!("hub listening on tcp {tcp_addr} and ws {ws_addr}{WS_PATH}");
    Ok(HubHandle { tcp_addr, ws_addr, shutdown, actor, listeners: vec![tcp_task, ws_task] })
}

/// Runs the hub until Ctrl-C or SIGTERM.
pub async fn run_hub(config: &HubConfig, options: HubOptions) -> Result<(), HubError> {
    let handle = start_hub(config, options).await?;
    wait_for_signal().await;
    tracing::info!("shutting down");
    handle.shutdown().await;
    Ok(())
}

#[cfg(unix)]
async fn wait_for_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    match signal(SignalKind::terminate()) {
        Ok(mut term) => {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

#[cfg(not(unix))]
async fn wait_for_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

enum Input {
    Connected(ConnId, mpsc::UnboundedSender<String>),
    Event(Event),
}

struct Actor {
    session: Session,
    conns: BTreeMap<ConnId, mpsc::UnboundedSender<String>>,
    detector: Option<Detector>,
    detector_cmd: PluginCommand,
    detector_tx: mpsc::UnboundedSender<DetectorOutput>,
    trainer_cmd: PluginCommand,
    embedder_cmd: Option<PluginCommand>,
    training: Option<JoinHandle<()>>,
    trainer_runs: usize,
    input_tx: mpsc::UnboundedSender<Input>,
}

impl Actor {
    async fn run(
        mut self,
        mut input: mpsc::UnboundedReceiver<Input>,
        mut detector: mpsc::UnboundedReceiver<DetectorOutput>,
        mut shutdown: watch::Receiver<bool>,
    ) -> HubSummary {
        loop {
            let event = tokio::select! {
                Some(msg) = input.recv() => match msg {
                    Input::Connected(id, tx) => {
                        self.conns.insert(id, tx);
                        Event::Connected(id)
                    }
                    Input::Event(e) => {
                        if let Event::Disconnected(id) = e {
                            self.conns.remove(&id);
                        }
                        e
                    }
                },
                Some(out) = detector.recv() => match out {
                    DetectorOutput::Line(generation, line) if self.is_current(generation) => Event::DetectorLine(line),
                    DetectorOutput::Exited(generation, reason) if self.is_current(generation) => {
                        self.detector = None;
                        Event::DetectorFailed(reason)
                    }
                    _ => continue,
                },
                _ = shutdown.changed() => break,
            };
            self.feed(event);
        }
        if let Some(t) = self.training.take() {
            t.abort();
        }
        HubSummary { trainer_runs: self.trainer_runs, store: self.session.into_store() }
    }

    fn is_current(&self, generation: u64) -> bool {
        self.detector.as_ref().is_some_and(|d| d.generation == generation)
    }

    fn feed(&mut self, event: Event) {
        let mut queue = VecDeque::from([event]);
        while let Some(event) = queue.pop_front() {
            let effects = self.session.handle(event);
            queue.extend(self.apply(effects));
        }
    }

    /// Carries out effects, returning follow-up events.
    fn apply(&mut self, effects: Vec<Effect>) -> Vec<Event> {
        let mut follow = Vec::new();
        for effect in effects {
            match effect {
                Effect::Send(id, line) => {
                    if let Some(tx) = self.conns.get(&id) {
                        let _ = tx.send(line);
                    }
                }
                Effect::Detect(line) => {
                    if !self.detector.as_ref().is_some_and(|d| d.send(line)) {
                        follow.push(Event::DetectorFailed("no detector is running; frame not analysed".into()));
                    }
                }
                Effect::Train(job) => {
                    self.trainer_runs += 1;
                    let trainer = self.trainer_cmd.clone();
                    let embedder = self.embedder_cmd.clone();
                    let input = self.input_tx.clone();
                    self.training = Some(tokio::spawn(async move {
                        let report = run_training(job, trainer, embedder).await;
                        let _ = input.send(Input::Event(Event::TrainingFinished(report)));
                    }));
                }
                Effect::StartDetector { weights, model_version } => {
                    if let Err(e) = self.spawn_detector(&weights, &model_version) {
                        follow.push(Event::DetectorFailed(e.to_string()));
                    }
                }
                Effect::Warn(message) => tracing::warn!("{message}"),
            }
        }
        follow
    }

    fn spawn_detector(&mut self, weights: &Path, model_version: &str) -> Result<(), HubError> {
        let generation = self.detector.as_ref().map_or(1, |d| d.generation + 1);
        self.detector = None;
        let detector = Detector::spawn(&self.detector_cmd, weights, model_version, generation, self.detector_tx.clone())
            .map_err(|e| HubError::PluginSpawnFailure {
                plugin: "detector",
                command: self.detector_cmd.display.clone(),
                reason: e.to_string(),
            })?;
        self.detector = Some(detector);
        Ok(())
    }
}

async fn accept_tcp(listener: TcpListener, input: mpsc::UnboundedSender<Input>, next_id: Arc<AtomicU64>) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                tokio::spawn(serve_tcp(stream, id, input.clone()));
            }
            Err(e) => tracing::warn!("accept failed: {e}"),
        }
    }
}

async fn serve_tcp(stream: TcpStream, id: ConnId, input: mpsc::UnboundedSender<Input>) {
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    if input.send(Input::Connected(id, out_tx)).is_err() {
        return;
    }
    let (read, mut write) = stream.into_split();
    let reader = async {
        let mut reader = BufReader::new(read);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    let line = String::from_utf8_lossy(&buf).trim_end_matches(['\r', '\n']).to_string();
                    if line.trim().is_empty() {
                        continue;
                    }
                    if input.send(Input::Event(Event::Line(id, line))).is_err() {
                        break;
                    }
                }
            }
        }
    };
    let writer = async {
        while let Some(line) = out_rx.recv().await {
            if write.write_all(line.as_bytes()).await.is_err() || write.write_all(b"\n").await.is_err() {
                break;
            }
        }
        let _ = write.shutdown().await;
    };
    tokio::select! {
        _ = reader => {}
        _ = writer => {}
    }
    let _ = input.send(Input::Event(Event::Disconnected(id)));
}

#[derive(Clone)]
struct WsState {
    input: mpsc::UnboundedSender<Input>,
    next_id: Arc<AtomicU64>,
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<WsState>) -> Response {
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    ws.on_upgrade(move |socket| serve_ws(socket, id, state.input))
}

async fn serve_ws(socket: WebSocket, id: ConnId, input: mpsc::UnboundedSender<Input>) {
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    if input.send(Input::Connected(id, out_tx)).is_err() {
        return;
    }
    let (mut sink, mut stream) = socket.split();
    let reader = async {
        while let Some(Ok(msg)) = stream.next().await {
            let text = match msg {
                WsMessage::Text(t) => t.as_str().to_string(),
                WsMessage::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                WsMessage::Close(_) => break,
                WsMessage::Ping(_) | WsMessage::Pong(_) => continue,
            };
            let line = text.trim_end_matches(['\r', '\n']).to_string();
            if input.send(Input::Event(Event::Line(id, line))).is_err() {
                break;
            }
        }
    };
    let writer = async {
        while let Some(line) = out_rx.recv().await {
            if sink.send(WsMessage::Text(line.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    };
    tokio::select! {
        _ = reader => {}
        _ = writer => {}
    }
    let _ = input.send(Input::Event(Event::Disconnected(id)));
}
