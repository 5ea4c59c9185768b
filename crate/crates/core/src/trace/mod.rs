//! Compilation trace: an append-only, hash-chained JSONL event log with a
//! content-addressed blob directory, plus checkpoints, replay and reports.

pub mod checkpoint;
mod event;
pub mod replay;
pub mod report;
mod store;

use thiserror::Error;

pub use event::{EventKind, TraceEvent, SCHEMA_VERSION};
pub use replay::{replay, ReplayOutcome};
pub use report::{Report, ReportFormat};
pub use store::{blob_dir, BlobStore, TraceLog, TraceWriter};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O failure: {0}")]
    Io(String),
    #[error("divergence at seq {seq}: {reason}")]
    Divergence { seq: u64, reason: String },
    #[error("trace is incomplete")]
    Incomplete,
    #[error("malformed trace content: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint was written for configuration {checkpoint}, current configuration is {current}")]
    ConfigMismatch { checkpoint: String, current: String },
}
