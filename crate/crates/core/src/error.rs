//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes or dtypes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// External input (image, tensor data) is malformed, e.g. non-finite.
    #[error("input error: {0}")]
    Input(String),

    /// An API was used outside its contract (bad index, empty tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A planted-model specification violates its invariants.
    #[error("spec error: {0}")]
    Spec(String),

    /// A dataset is empty or otherwise unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (singular system, ill-normalized curve).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// No firing token exists for a max-activation target.
    #[error("no target: {0}")]
    NoTarget(String),

    /// Target excluded from aggregates because its activation is ~0.
    #[error("target skipped: {0}")]
    SkipTarget(String),

    /// Corrupt or version-mismatched file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by how the caller invoked something, as
    /// opposed to problems with the data or the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_))
    }
}
