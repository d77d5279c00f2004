//! A scripted teaching session against a live hub: a source streams frames
//! over TCP, an annotator on the WebSocket endpoint answers every SIP with
//! the frame's ground-truth boxes and asks for fine-tuning every
//! `per_round` saves.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use futures::{SinkExt, StreamExt};
use image::{ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teachhub_core::annotations::{parse_label_file, ClassMap, NormalizedBox};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::clock::TickClock;
use crate::config::HubConfig;
use crate::protocol::{decode, AnnotatedBox, Annotation, Envelope, Frame, Hello, Message, ModeName, RoundStatusBody, PNG_BASE64};
use crate::server::{start_hub, HubError, HubOptions, HubSummary};

/// Timestamp of the first clock reading in a simulated session.
pub const SIMULATION_EPOCH_MS: u64 = 1_700_000_000_000;
const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("{}: {reason}", path.display())]
    Frames { path: PathBuf, reason: String },
    #[error("store directory {} is not empty", .0.display())]
    StoreNotEmpty(PathBuf),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error("connection to the hub failed: {0}")]
    Connection(String),
    #[error("hub answered {0}")]
    Rejected(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("round {round} failed; see the hub log")]
    RoundFailed { round: u32 },
}

/// One ground-truth frame.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub stem: String,
    pub png: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<NormalizedBox>,
}

/// Reads `images/*.png` with their `labels/<stem>.txt`, plus `classes.txt`
/// if present (door/handle otherwise).
pub fn load_frames(dir: &Path) -> Result<(ClassMap, Vec<SceneFrame>), SimulateError> {
    let fail = |path: &Path, reason: String| SimulateError::Frames { path: path.to_path_buf(), reason };
    let classes = dir.join("classes.txt");
    let class_map = if classes.is_file() {
        let text = fs::read_to_string(&classes).map_err(|e| fail(&classes, e.to_string()))?;
        ClassMap::parse(&text).map_err(|e| fail(&classes, e.to_string()))?
    } else {
        ClassMap::door_handle()
    };
    let images = dir.join("images");
    let mut paths: Vec<PathBuf> = fs::read_dir(&images)
        .map_err(|e| fail(&images, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let png = fs::read(&path).map_err(|e| fail(&path, e.to_string()))?;
        let (width, height) = ImageReader::with_format(std::io::Cursor::new(&png), ImageFormat::Png)
            .into_dimensions()
            .map_err(|e| fail(&path, e.to_string()))?;
        let label = dir.join("labels").join(format!("{stem}.txt"));
        let text = fs::read_to_string(&label).map_err(|e| fail(&label, e.to_string()))?;
        let boxes = parse_label_file(&text, &class_map).map_err(|e| fail(&label, e.to_string()))?;
        frames.push(SceneFrame { stem, png, width, height, boxes });
    }
    if frames.is_empty() {
        return Err(fail(&images, "no PNG frames".into()));
    }
    Ok((class_map, frames))
}

/// Shifts and rescales each box by up to `jitter` of its size. A box that
/// would leave the image keeps its original geometry.
pub fn jitter_boxes(boxes: &[NormalizedBox], jitter: f64, class_map: &ClassMap, rng: &mut ChaCha8Rng) -> Vec<NormalizedBox> {
    if jitter <= 0.0 {
        return boxes.to_vec();
    }
    boxes
        .iter()
        .map(|b| {
            let mut u = || rng.random_range(-jitter..=jitter);
            let moved = NormalizedBox::new(b.class_id, b.cx + u() * b.w, b.cy + u() * b.h, b.w * (1.0 + u()), b.h * (1.0 + u()));
            moved.validated(class_map).unwrap_or(*b)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub frames_dir: PathBuf,
    pub rounds: u32,
    pub per_round: u32,
    pub seed: u64,
    pub jitter: f64,
    /// Plugin commands, bins and cache bound come from here; the store root
    /// and listen addresses are replaced.
    pub config: HubConfig,
    pub store_root: PathBuf,
}

#[derive(Debug)]
pub struct SimulationOutcome {
    pub saves: usize,
    pub hub: HubSummary,
}

pub async fn simulate(options: SimulateOptions) -> Result<SimulationOutcome, SimulateError> {
    let (class_map, frames) = load_frames(&options.frames_dir)?;
    let root = &options.store_root;
    if root.exists() && fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(SimulateError::StoreNotEmpty(root.clone()));
    }
    let config = HubConfig {
        listen_tcp: "127.0.0.1:0".into(),
        listen_ws: "127.0.0.1:0".into(),
        store_root: root.clone(),
        ..options.config.clone()
    };
    let hub_options = HubOptions { clock: Arc::new(TickClock::new(SIMULATION_EPOCH_MS, 1)), class_map: class_map.clone() };
    let hub = start_hub(&config, hub_options).await?;
    let script = run_script(&options, &class_map, &frames, hub.tcp_addr(), &hub.ws_url()).await;
    let summary = hub.shutdown().await;
    Ok(SimulationOutcome { saves: script?, hub: summary })
}

async fn run_script(
    options: &SimulateOptions,
    class_map: &ClassMap,
    frames: &[SceneFrame],
    tcp: std::net::SocketAddr,
    ws_url: &str,
) -> Result<usize, SimulateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut source = TcpClient::connect(tcp).await?;
    source.send(Message::Hello(Hello { role: "source".into(), name: "simulated-source".into() })).await?;
    source.expect_status().await?;
    let mut annotator = WsClient::connect(ws_url).await?;
    annotator.send(Message::Hello(Hello { role: "annotator".into(), name: "simulated-annotator".into() })).await?;
    annotator.recv_until("round_status", |m| matches!(m, Message::RoundStatus(_))).await?;

    let total = options.per_round as usize * options.rounds.max(1) as usize;
    for i in 0..total {
        let scene = &frames[i % frames.len()];
        let frame_id = format!("sim-{i:04}-{}", scene.stem);
        source
            .send(Message::Frame(Frame {
                frame_id: frame_id.clone(),
                width: scene.width,
                height: scene.height,
                encoding: PNG_BASE64.into(),
                data: BASE64.encode(&scene.png),
            }))
            .await?;
        annotator
            .recv_until(&format!("SIP for {frame_id}"), |m| matches!(m, Message::Sip(s) if s.frame_id == frame_id))
            .await?;
        let boxes = jitter_boxes(&scene.boxes, options.jitter, class_map, &mut rng);
        annotator
            .send(Message::Annotation(Annotation {
                frame_id: frame_id.clone(),
                boxes: boxes.into_iter().map(AnnotatedBox::from).collect(),
            }))
            .await?;
        annotator
            .recv_until(&format!("save_ack for {frame_id}"), |m| matches!(m, Message::SaveAck(a) if a.frame_id == frame_id))
            .await?;
        if options.rounds > 0 && (i + 1) % options.per_round as usize == 0 {
            annotator.finetune().await?;
        }
    }
    Ok(total)
}

struct TcpClient {
    reader: BufReader<tokio::net::tcp::OwnedReadHalf>,
    writer: tokio::net::tcp::OwnedWriteHalf,
    seq: u64,
}

impl TcpClient {
    async fn connect(addr: std::net::SocketAddr) -> Result<Self, SimulateError> {
        let stream = TcpStream::connect(addr).await.map_err(|e| SimulateError::Connection(e.to_string()))?;
        let (read, writer) = stream.into_split();
        Ok(Self { reader: BufReader::new(read), writer, seq: 0 })
    }

    async fn send(&mut self, message: Message) -> Result<(), SimulateError> {
        self.seq += 1;
        let line = Envelope::new(self.seq, 0, message).encode() + "\n";
        self.writer.write_all(line.as_bytes()).await.map_err(|e| SimulateError::Connection(e.to_string()))
    }

    async fn expect_status(&mut self) -> Result<(), SimulateError> {
        let mut line = String::new();
        let read = timeout(REPLY_TIMEOUT, self.reader.read_line(&mut line))
            .await
            .map_err(|_| SimulateError::Timeout("round_status".into()))?;
        read.map_err(|e| SimulateError::Connection(e.to_string()))?;
        match decode(&line) {
            Ok(Envelope { message: Message::RoundStatus(_), .. }) => Ok(()),
            _ => Err(SimulateError::Rejected(line.trim().to_string())),
        }
    }
}

type WsStream = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

struct WsClient {
    socket: WsStream,
    seq: u64,
}

impl WsClient {
    async fn connect(url: &str) -> Result<Self, SimulateError> {
        let (socket, _) = tokio_tungstenite::connect_async(url).await.map_err(|e| SimulateError::Connection(e.to_string()))?;
        Ok(Self { socket, seq: 0 })
    }

    async fn send(&mut self, message: Message) -> Result<(), SimulateError> {
        self.seq += 1;
        let line = Envelope::new(self.seq, 0, message).encode();
        self.socket.send(WsMessage::text(line)).await.map_err(|e| SimulateError::Connection(e.to_string()))
    }

    async fn recv(&mut self, what: &str) -> Result<Message, SimulateError> {
        loop {
            let next = timeout(REPLY_TIMEOUT, self.socket.next())
                .await
                .map_err(|_| SimulateError::Timeout(what.to_string()))?;
            let text = match next {
                Some(Ok(WsMessage::Text(t))) => t.to_string(),
                Some(Ok(WsMessage::Close(_))) | None => return Err(SimulateError::Connection("hub closed the connection".into())),
                Some(Ok(_)) => continue,
                Some(Err(e)) => return Err(SimulateError::Connection(e.to_string())),
            };
            let env = decode(&text).map_err(|e| SimulateError::Rejected(format!("an unreadable line: {e}")))?;
            return match env.message {
                Message::Error(e) => Err(SimulateError::Rejected(format!("{}: {}", e.code, e.message))),
                m => Ok(m),
            };
        }
    }

    async fn recv_until(&mut self, what: &str, wanted: impl Fn(&Message) -> bool) -> Result<Message, SimulateError> {
        loop {
            let m = self.recv(what).await?;
            if wanted(&m) {
                return Ok(m);
            }
        }
    }

    /// Requests a round and waits for the hub to return to collecting.
    async fn finetune(&mut self) -> Result<(), SimulateError> {
        self.send(Message::FinetuneRequest {}).await?;
        let mut training = None;
        loop {
            let Message::RoundStatus(RoundStatusBody::Status(status)) = self.recv("training to finish").await? else {
                continue;
            };
            match (status.mode, training) {
                (ModeName::Training, _) => training = Some(status.round),
                (ModeName::Collecting, Some(r)) if status.round == r + 1 => return Ok(()),
                (ModeName::Collecting, Some(r)) => return Err(SimulateError::RoundFailed { round: r }),
                (ModeName::Collecting, None) => {}
            }
        }
    }
}
