//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error for embedding, bank, neighbor, objective, encoder,
/// dataset, and trainer operations.
#[derive(Debug, Error)]
pub enum LaError {
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An index refers past the end of a bank, dataset, or clustering.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A vector that must be normalized has norm below 1e-12.
    #[error("cannot normalize vector with near-zero norm ({norm:e})")]
    ZeroNorm { norm: f64 },

    /// The close set does not intersect the background set, so the
    /// aggregation objective is undefined for this sample.
    #[error("close and background sets share no members")]
    EmptyIntersection,

    /// A configuration value is missing, malformed, or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// A binary artifact has the wrong magic, version, or layout.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Labels are absent or inconsistent with the data they describe.
    #[error("label error: {0}")]
    Label(String),

    /// Underlying file IO failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LaError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LaError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, reason: impl Into<String>) -> Self {
        LaError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}
