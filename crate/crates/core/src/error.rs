use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Record parsing
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported signal format {0} (only format 16 is supported)")]
    UnsupportedFormat(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("signal {0} has zero gain")]
    ZeroGain(usize),

    // Preprocessing
    #[error("empty signal")]
    EmptySignal,
    #[error("unknown lead {0:?}")]
    UnknownLead(String),
    #[error("invalid channel configuration: {0}")]
    InvalidChannelConfig(String),

    // Tensor graph
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    // Training
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    // Evaluation
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,

    // Experiments
    #[error("unknown scenario {0} (expected 1 or 2)")]
    UnknownScenario(u32),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    // Containers and files
    #[error("bad container {path:?}: {reason}")]
    BadContainer { path: Option<PathBuf>, reason: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for bad requests, 2 for bad data, 3 for
    /// internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownLead(_)
            | Error::InvalidChannelConfig(_)
            | Error::InvalidConfig(_)
            | Error::UnknownScenario(_)
            | Error::InvalidSpec(_)
            | Error::Config(_) => 1,
            Error::MalformedHeader(_)
            | Error::UnsupportedFormat(_)
            | Error::TruncatedPayload { .. }
            | Error::ZeroGain(_)
            | Error::EmptySignal
            | Error::EmptyDataset
            | Error::SingleClassDataset
            | Error::LengthMismatch(..)
            | Error::EmptyInput
            | Error::BadContainer { .. }
            | Error::CheckpointMismatch(_)
            | Error::Io { .. } => 2,
            Error::ShapeMismatch { .. } | Error::DegenerateBatch(_) | Error::IndexOutOfRange { .. } | Error::NonScalarLoss(_) => 3,
        }
    }
}
