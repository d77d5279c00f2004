//! Core data model for interactive detector teaching: YOLO label handling,
//! sample-set diversity scoring, mAP evaluation and the on-disk store of
//! samples, fine-tuning rounds and model versions.

pub mod annotations;
pub mod datastore;
pub mod diversity;
pub mod evaluation;

pub use annotations::{ClassMap, ClassRemap, Detection, NormalizedBox, PixelBox};
pub use datastore::{Store, StoreError};
pub use diversity::{HadesScore, DEFAULT_BINS};
pub use evaluation::{map50, ApResult};
