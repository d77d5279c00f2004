//! Line-delimited JSON messages exchanged between the hub, its clients and
//! the detector plugin.
//!
//! Every message is one JSON object on one line:
//!
//! ```text
//! {"type":"hello","seq":1,"ts":1700000000000,"role":"annotator","name":"ui"}
//! ```
//!
//! `type`, `seq` and `ts` form the envelope; the rest is the payload of that
//! type. Images travel as base64 PNG.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use teachhub_core::annotations::{ClassMap, NormalizedBox};

pub const PNG_BASE64: &str = "png-base64";

/// Message types accepted on the wire.
pub const MESSAGE_TYPES: [&str; 10] = [
    "hello",
    "frame",
    "predictions",
    "sip",
    "annotation",
    "save_ack",
    "finetune_request",
    "round_status",
    "model_updated",
    "error",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Source,
    Annotator,
    Observer,
}

impl fmt::Display for ClientRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClientRole::Source => "source",
            ClientRole::Annotator => "annotator",
            ClientRole::Observer => "observer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub role: String,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    pub encoding: String,
    pub data: String,
}

/// A predicted box as sent by the detector and relayed in SIPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBox {
    pub class_id: u32,
    #[serde(default)]
    pub class_name: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl PredictedBox {
    pub fn to_box(&self) -> NormalizedBox {
        NormalizedBox::new(self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub frame_id: String,
    pub model_version: String,
    pub boxes: Vec<PredictedBox>,
}

/// Scene image with predictions, pushed to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sip {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    pub data: String,
    pub model_version: String,
    pub boxes: Vec<PredictedBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<AnnotatedBox> for NormalizedBox {
    fn from(b: AnnotatedBox) -> Self {
        NormalizedBox::new(b.class_id, b.cx, b.cy, b.w, b.h)
    }
}

impl From<NormalizedBox> for AnnotatedBox {
    fn from(b: NormalizedBox) -> Self {
        AnnotatedBox { class_id: b.class_id, cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_id: String,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaveAck {
    pub frame_id: String,
    pub sample_id: String,
    pub round: u32,
    pub pending_count: usize,
    pub overall_collected: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Collecting,
    Training,
}

/// Payload of `round_status`. Clients send it with no fields to ask for one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStatus {
    pub mode: ModeName,
    pub round: u32,
    pub pending_count: usize,
    pub overall_collected: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_hades: Option<f64>,
    pub model_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelUpdated {
    pub model_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    /// Not a complete JSON object, or a payload missing required fields.
    Malformed,
    UnknownType,
    /// The sender's role may not send this message.
    BadRole,
    HelloRequired,
    AlreadyIdentified,
    MalformedFrame,
    DuplicateFrame,
    UnknownFrame,
    InvalidBoxes,
    AlreadyTraining,
    EmptyPendingPool,
    /// A cached frame was evicted to make room.
    Backpressure,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Frame(Frame),
    Predictions(Predictions),
    Sip(Sip),
    Annotation(Annotation),
    SaveAck(SaveAck),
    FinetuneRequest {},
    RoundStatus(RoundStatusBody),
    ModelUpdated(ModelUpdated),
    Error(ErrorPayload),
}

/// `round_status` from a client is a query with an empty payload; from the
/// hub it carries the full status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoundStatusBody {
    Status(RoundStatus),
    Query {},
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Frame(_) => "frame",
            Message::Predictions(_) => "predictions",
            Message::Sip(_) => "sip",
            Message::Annotation(_) => "annotation",
            Message::SaveAck(_) => "save_ack",
            Message::FinetuneRequest {} => "finetune_request",
            Message::RoundStatus(_) => "round_status",
            Message::ModelUpdated(_) => "model_updated",
            Message::Error(_) => "error",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>, in_reply_to_seq: Option<u64>) -> Self {
        Message::Error(ErrorPayload { code, message: message.into(), in_reply_to_seq })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub ts: u64,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(seq: u64, ts: u64, message: Message) -> Self {
        Self { seq, ts, message }
    }

    /// One line of JSON without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

/// Why an incoming line was rejected, plus the sender's `seq` when it could
/// be read.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub code: ErrorCode,
    pub message: String,
    pub seq: Option<u64>,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for DecodeError {}

/// Parses one line. Unknown `type`s get [`ErrorCode::UnknownType`];
/// everything else that fails is [`ErrorCode::Malformed`].
pub fn decode(line: &str) -> Result<Envelope, DecodeError> {
    let malformed = |message: String, seq| DecodeError { code: ErrorCode::Malformed, message, seq };
    let value: Value = serde_json::from_str(line.trim()).map_err(|e| malformed(format!("invalid JSON: {e}"), None))?;
    let Value::Object(map) = &value else {
        return Err(malformed("message is not a JSON object".into(), None));
    };
    let seq = map.get("seq").and_then(Value::as_u64);
    let ty = match map.get("type") {
        Some(Value::String(t)) => t.clone(),
        _ => return Err(malformed("missing string field `type`".into(), seq)),
    };
    if !MESSAGE_TYPES.contains(&ty.as_str()) {
        return Err(DecodeError { code: ErrorCode::UnknownType, message: format!("unknown message type `{ty}`"), seq });
    }
    if seq.is_none() {
        return Err(malformed("missing integer field `seq`".into(), None));
    }
    if map.get("ts").and_then(Value::as_u64).is_none() {
        return Err(malformed("missing integer field `ts`".into(), seq));
    }
    serde_json::from_value(value).map_err(|e| malformed(format!("bad `{ty}` payload: {e}"), seq))
}

/// Converts annotation boxes into validated store boxes.
pub fn validate_boxes(boxes: &[AnnotatedBox], class_map: &ClassMap) -> Result<Vec<NormalizedBox>, String> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| NormalizedBox::from(*b).validated(class_map).map_err(|e| format!("box {i}: {e}")))
        .collect()
}
