//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read audio file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("audio file {0} contains no samples")]
    EmptyAudio(PathBuf),

    #[error("invalid sample rate {0}")]
    InvalidSampleRate(i64),

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("frame has {actual} samples, expected {expected}")]
    FrameLength { expected: usize, actual: usize },

    #[error("embedding key {0} not found in store")]
    MissingEmbedding(String),

    #[error("embedding dimension mismatch: store has {found}, configuration expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("silent signal: SNR is undefined")]
    SilentSignal,

    #[error("noise ({noise} samples) is shorter than the signal ({signal} samples)")]
    NoiseTooShort { noise: usize, signal: usize },

    #[error("noise pool is empty")]
    EmptyNoisePool,

    #[error("class {class:?} has {count} clips; at least {min} are needed to stratify")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("label {0:?} is not in the repertoire")]
    UnknownLabel(String),

    #[error("frame list for {0} is empty")]
    EmptyClass(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Box<crate::optim::History>,
    },

    #[error("kernel matrix is not positive definite after jitter")]
    SingularKernel,

    #[error("frame index {index} received after {previous}")]
    OutOfOrder { index: usize, previous: usize },

    #[error("segment has no positive frame")]
    NoPositiveFrame,

    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("AUC needs both positive and negative samples")]
    SingleClass,

    #[error("cannot place {events} events with {gap} s gaps in {duration} s")]
    InfeasiblePacking {
        events: usize,
        gap: f64,
        duration: f64,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint/front-end mismatch: {0}")]
    FrontEndMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
