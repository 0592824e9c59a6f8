//! Error type shared across the crate.

use thiserror::Error;

/// All failure modes of the library surface.
#[derive(Debug, Error)]
pub enum Error {
    /// An input's shape does not match what the operation requires.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An input was rejected for a reason other than shape.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The operation is not defined for this model kind.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// The requested adaptation mode does not apply to this model. The
    /// payload is the benchmark status reason, e.g. `mode=theta_only`.
    #[error("mode skipped: {0}")]
    ModeSkip(String),

    /// A serve request arrived before any snapshot was published.
    #[error("service unavailable: no snapshot published")]
    NoSnapshot,

    /// An audit record references a snapshot version missing from the archive.
    #[error("audit gap: snapshot version {0} not in archive")]
    AuditGap(u64),

    /// Replaying an audit record did not reproduce the recorded output.
    #[error("audit mismatch for request {request_id}: {detail}")]
    AuditMismatch { request_id: u64, detail: String },

    /// A binary or CSV payload failed to parse. `offset` is in bytes for
    /// binary formats and in lines for text formats.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Not enough data points for a statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The experiment config is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Benchmark status string, `OK`-side errors excluded: `ModeSkip("x")`
    /// renders as `SKIP(x)`.
    pub fn skip_reason(&self) -> Option<&str> {
        match self {
            Error::ModeSkip(reason) => Some(reason),
            _ => None,
        }
    }
}
