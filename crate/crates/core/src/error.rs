//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (finiteness, range, emptiness, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Channel counts disagree between a feature map and statistics.
    #[error("channel mismatch: feature has {feature} channels, stats have {stats}")]
    ChannelMismatch { feature: usize, stats: usize },

    /// The optimization produced a non-finite loss or parameter.
    #[error("mining diverged at iteration {iteration}: {what} became non-finite")]
    MiningDiverged { iteration: usize, what: &'static str },

    /// A per-instance mining failure inside a bank run.
    #[error("mining failed on source instance {index}: {source}")]
    MiningFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Persisted artifact is malformed or inconsistent.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Artifact produced by one encoder consumed with another.
    #[error("encoder mismatch: artifact was produced with '{artifact}', current backend is '{backend}'")]
    EncoderMismatch { artifact: String, backend: String },

    /// The backend cannot perform the requested operation.
    #[error("backend '{backend}' does not support {operation}: {hint}")]
    Capability {
        backend: String,
        operation: &'static str,
        hint: &'static str,
    },

    /// Unknown prompt for the table-based toy text encoder.
    #[error("toy text encoder has no entry for prompt '{0}'")]
    UnknownToyPrompt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    ImageDecode {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate bad input rather than a runtime failure.
    /// The CLI maps these to exit code 2, everything else to 3.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::ShapeMismatch { .. }
                | Error::ChannelMismatch { .. }
                | Error::EncoderMismatch { .. }
                | Error::Capability { .. }
                | Error::UnknownToyPrompt(_)
                | Error::Config(_)
        )
    }
}
