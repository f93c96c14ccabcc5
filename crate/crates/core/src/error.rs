use thiserror::Error;

use crate::proposal::SegmentId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed mask: run lengths sum to {sum}, expected {expected}")]
    MalformedMask { sum: u64, expected: u64 },

    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: u32,
        left_h: u32,
        right_w: u32,
        right_h: u32,
    },

    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("unknown segment id {0}")]
    UnknownSegment(SegmentId),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
