//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("invalid image record: {0}")]
    InvalidRecord(String),

    #[error("invalid site profile: {0}")]
    InvalidProfile(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient patients: have {have}, need at least {need}")]
    InsufficientPatients { have: usize, need: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("output map geometry mismatch: {0}")]
    GridMismatch(String),

    #[error("missing checkpoint for task {task}")]
    MissingCheckpoint { task: usize },

    #[error("unknown strategy '{0}', valid names: baseline, joint, ewc, lwf, replay-naive, replay-conf")]
    UnknownStrategy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run interrupted at a task boundary")]
    Interrupted,

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
