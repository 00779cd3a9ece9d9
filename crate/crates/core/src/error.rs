//! Error type shared across the library.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a model) disagree on shape.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A requested dimension is invalid (zero, or unsupported channel count).
    #[error("invalid dimension: {0}")]
    Dimension(String),

    /// An argument violates a documented precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A feature outside the supported envelope was requested.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A dataset file could not be ingested; `line` is 1-based within the manifest.
    #[error("ingestion error at {path}:{line}: {message}")]
    Ingestion {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// Malformed binary payload (NIT1 tensor, NMP1 model, PNM image, ...).
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    /// The classifier backend failed (process death, I/O, diagnostics attached).
    #[error("classifier backend error: {0}")]
    Backend(String),

    /// The external classifier spoke the wire protocol incorrectly.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The classifier does not advertise the needed capability.
    #[error("unsupported capability: {0}")]
    MissingCapability(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// An aggregate was requested over zero contributing elements.
    #[error("empty aggregate: {0}")]
    EmptyAggregate(String),

    /// Impact scores are undefined for a zero baseline accuracy.
    #[error("baseline accuracy is zero; impact score is undefined")]
    ZeroBaseline,

    /// Score weights violate the w1 + w2 = 1, w >= 0 constraint.
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    /// Inconsistent or incomplete run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape_mismatch(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }
}
