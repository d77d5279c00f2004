#![allow(dead_code)]

use std::fs;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use futures::{SinkExt, StreamExt};
use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teachhub::protocol::{decode, AnnotatedBox, Annotation, Envelope, ErrorCode, Frame, Hello, Message, PNG_BASE64};
use teachhub::replay::{TraceAction, TraceEvent};
use teachhub::HubConfig;
use teachhub_core::annotations::{serialize_label_file, NormalizedBox};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message as WsMessage;

pub const WAIT: Duration = Duration::from_secs(20);

/// A PNG with a seeded background and the given boxes painted in.
pub fn scene_png(width: u32, height: u32, seed: u64, boxes: &[NormalizedBox]) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = Rgb([rng.random(), rng.random(), rng.random()]);
    let mut img = RgbImage::from_pixel(width, height, bg);
    for b in boxes {
        let color = if b.class_id == 0 { Rgb([200, 120, 40]) } else { Rgb([30, 30, 220]) };
        let x0 = (b.x_min() * width as f64) as u32;
        let x1 = ((b.x_max() * width as f64) as u32).min(width);
        let y0 = (b.y_min() * height as f64) as u32;
        let y1 = ((b.y_max() * height as f64) as u32).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, color);
            }
        }
    }
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}

pub fn random_boxes(rng: &mut ChaCha8Rng, classes: u32) -> Vec<NormalizedBox> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let w = rng.random_range(0.1..0.4);
            let h = rng.random_range(0.1..0.4);
            let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
            // Round through the label format so stored and expected boxes agree.
            let line = format!("{} {cx:.6} {cy:.6} {w:.6} {h:.6}", rng.random_range(0..classes));
            teachhub_core::annotations::parse_label_line(&line, &teachhub_core::ClassMap::door_handle()).unwrap()
        })
        .collect()
}

/// `images/`, `labels/` and `classes.txt` for `n` small synthetic frames.
pub fn write_frames(dir: &Path, n: usize, seed: u64) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("labels")).unwrap();
    fs::write(dir.join("classes.txt"), "door\nhandle\n").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let boxes = random_boxes(&mut rng, 2);
        let stem = format!("frame{i:03}");
        fs::write(dir.join("images").join(format!("{stem}.png")), scene_png(64, 48, seed + i as u64, &boxes)).unwrap();
        fs::write(dir.join("labels").join(format!("{stem}.txt")), serialize_label_file(&boxes)).unwrap();
    }
}

pub fn line(seq: u64, message: Message) -> String {
    Envelope::new(seq, 0, message).encode()
}

pub fn hello(seq: u64, role: &str) -> String {
    line(seq, Message::Hello(Hello { role: role.into(), name: format!("test-{role}") }))
}

pub fn frame(seq: u64, frame_id: &str, png: &[u8], width: u32, height: u32) -> String {
    line(
        seq,
        Message::Frame(Frame {
            frame_id: frame_id.into(),
            width,
            height,
            encoding: PNG_BASE64.into(),
            data: BASE64.encode(png),
        }),
    )
}

pub fn annotation(seq: u64, frame_id: &str, boxes: &[NormalizedBox]) -> String {
    line(
        seq,
        Message::Annotation(Annotation {
            frame_id: frame_id.into(),
            boxes: boxes.iter().copied().map(AnnotatedBox::from).collect(),
        }),
    )
}

pub fn error_code(line: &str) -> Option<ErrorCode> {
    match decode(line).ok()?.message {
        Message::Error(e) => Some(e.code),
        _ => None,
    }
}

pub fn bin(name: &str) -> PathBuf {
    match name {
        "teachhub" => PathBuf::from(env!("CARGO_BIN_EXE_teachhub")),
        "mock-detector" => PathBuf::from(env!("CARGO_BIN_EXE_mock-detector")),
        "mock-trainer" => PathBuf::from(env!("CARGO_BIN_EXE_mock-trainer")),
        "mock-embedder" => PathBuf::from(env!("CARGO_BIN_EXE_mock-embedder")),
        other => panic!("no binary {other}"),
    }
}

fn quoted(path: &Path) -> String {
    shlex::try_quote(path.to_str().unwrap()).unwrap().into_owned()
}

/// A config running the mock plugins on ephemeral ports.
pub fn mock_config(store_root: &Path, trainer_args: &str) -> HubConfig {
    HubConfig {
        listen_tcp: "127.0.0.1:0".into(),
        listen_ws: "127.0.0.1:0".into(),
        store_root: store_root.to_path_buf(),
        detector_cmd: format!("{} --seed 3", quoted(&bin("mock-detector"))),
        trainer_cmd: format!("{} {trainer_args}", quoted(&bin("mock-trainer"))),
        embedder_cmd: Some(quoted(&bin("mock-embedder"))),
        cache_bound: 64,
        bins: 10,
        initial_weights: None,
    }
}

pub struct TcpClient {
    reader: BufReader<tokio::net::tcp::OwnedReadHalf>,
    writer: tokio::net::tcp::OwnedWriteHalf,
}

impl TcpClient {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (read, writer) = TcpStream::connect(addr).await.unwrap().into_split();
        Self { reader: BufReader::new(read), writer }
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) {
        self.writer.write_all(bytes).await.unwrap();
    }

    pub async fn send(&mut self, line: &str) {
        self.send_raw(format!("{line}\n").as_bytes()).await;
    }

    pub async fn recv(&mut self) -> String {
        let mut line = String::new();
        let n = timeout(WAIT, self.reader.read_line(&mut line)).await.expect("hub reply timed out").unwrap();
        assert!(n > 0, "hub closed the connection");
        line.trim_end().to_string()
    }

    pub async fn recv_env(&mut self) -> Envelope {
        decode(&self.recv().await).unwrap()
    }
}

type WsStream = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

pub struct WsClient(WsStream);

impl WsClient {
    pub async fn connect(url: &str) -> Self {
        Self(tokio_tungstenite::connect_async(url).await.unwrap().0)
    }

    pub async fn send(&mut self, line: &str) {
        self.0.send(WsMessage::text(line)).await.unwrap();
    }

    pub async fn recv(&mut self) -> String {
        loop {
            match timeout(WAIT, self.0.next()).await.expect("hub reply timed out") {
                Some(Ok(WsMessage::Text(t))) => return t.to_string(),
                Some(Ok(WsMessage::Close(_))) | None => panic!("hub closed the connection"),
                Some(Ok(_)) => continue,
                Some(Err(e)) => panic!("websocket error: {e}"),
            }
        }
    }

    pub async fn recv_env(&mut self) -> Envelope {
        decode(&self.recv().await).unwrap()
    }

    /// Reads until a message satisfies `wanted`, returning everything read.
    pub async fn recv_until(&mut self, wanted: impl Fn(&Message) -> bool) -> Vec<Envelope> {
        let mut seen = Vec::new();
        loop {
            let env = self.recv_env().await;
            let done = wanted(&env.message);
            seen.push(env);
            if done {
                return seen;
            }
        }
    }
}

/// A trace where a source and an annotator save `n` frames per batch, each
/// batch followed by a fine-tune request. Batches flagged `true` carry door
/// boxes only.
pub fn teaching_trace(batches: &[(usize, bool)], seed: u64) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut ts = 1_700_000_000_000;
    let mut seq = 0;
    let mut push = |conn: u64, action: TraceAction| {
        ts += 10;
        events.push(TraceEvent { ts, conn, action });
    };
    let mut next = || {
        seq += 1;
        seq
    };
    push(1, TraceAction::Connect);
    push(1, TraceAction::Line { line: hello(next(), "source") });
    push(2, TraceAction::Connect);
    push(2, TraceAction::Line { line: hello(next(), "annotator") });
    let mut frame_no = 0;
    for &(n, doors_only) in batches {
        for _ in 0..n {
            let mut boxes = random_boxes(&mut rng, 2);
            if doors_only {
                boxes.iter_mut().for_each(|b| b.class_id = 0);
            }
            let id = format!("t{frame_no:04}");
            let png = scene_png(32, 24, frame_no, &boxes);
            frame_no += 1;
            push(1, TraceAction::Line { line: frame(next(), &id, &png, 32, 24) });
            push(2, TraceAction::Line { line: annotation(next(), &id, &boxes) });
        }
        push(2, TraceAction::Line { line: line(next(), Message::FinetuneRequest {}) });
    }
    events
}
