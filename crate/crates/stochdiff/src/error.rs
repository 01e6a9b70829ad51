//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown variant: {0}")]
    UnknownVariant(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
