use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric fault in {op}{}: non-finite value", iter.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NumericFault { op: String, iter: Option<u64> },

    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,

    #[error("invalid {field}: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("corrupt record {record} in {}: {msg}", path.display())]
    CorruptRecord {
        path: PathBuf,
        record: usize,
        msg: String,
    },

    #[error("missing dataset: {0}")]
    MissingDataset(String),

    #[error("transform: {0}")]
    Transform(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            field,
            msg: msg.into(),
        }
    }

    /// Stable machine-readable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NumericFault { .. } => "numeric-fault",
            Error::TapeConsumed => "tape-consumed",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::CorruptRecord { .. } => "corrupt-record",
            Error::MissingDataset(_) => "missing-dataset",
            Error::Transform(_) => "transform",
            Error::Checkpoint(_) => "checkpoint",
            Error::GradCheck(_) => "gradcheck",
            Error::Io(_) => "io",
        }
    }
}
