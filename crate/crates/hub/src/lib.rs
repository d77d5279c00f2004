//! Message hub for interactive detector teaching.
//!
//! Image sources stream frames in, a detector plugin predicts boxes, the hub
//! relays frame-plus-predictions to annotators, stores their corrections and,
//! on request, runs a trainer plugin to produce the next model version.

pub mod clock;
pub mod config;
pub mod mock;
pub mod plugins;
pub mod protocol;
pub mod replay;
pub mod report;
pub mod server;
pub mod session;
pub mod simulate;

pub use config::HubConfig;
pub use server::{run_hub, start_hub, HubError, HubHandle, HubOptions, HubSummary};
pub use session::{Effect, Event, Mode, Session, SessionOptions};
