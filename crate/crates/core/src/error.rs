use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        op: &'static str,
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("{0}: non-finite value")]
    NonFinite(String),
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f32),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("transfer shape mismatch: {}", .0.join(", "))]
    TransferMismatch(Vec<String>),
    #[error("non-finite gradient in {}", .0.join(", "))]
    NonFiniteGradient(Vec<String>),
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("audio {path}: {reason}")]
    Audio { path: PathBuf, reason: String },
    #[error("waveform too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("undefined SNR: {0}")]
    UndefinedSnr(&'static str),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("class {label} has {count} record(s), need at least 2")]
    TooFewRecords { label: usize, count: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
