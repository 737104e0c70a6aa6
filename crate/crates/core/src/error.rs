//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, out-of-range
    /// step index, label layout mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration (empty ranges, bad field values).
    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite quantity; the message names the
    /// offending parameter block or loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A trajectory failed a store invariant; the message names the check.
    #[error("trajectory rejected: {0}")]
    InvalidTrajectory(String),

    /// A metric or sampling operation ran over an empty selection.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// No stored trajectory satisfies the requested condition filter.
    #[error("condition unsatisfiable: no trajectory matches {0}")]
    Unsatisfiable(String),

    /// The instance exceeds the exhaustive-search guard.
    #[error("instance too large: {0}; use coordinate_ascent instead")]
    InstanceTooLarge(String),

    /// Malformed file content (bad magic, checksum mismatch, parse failure).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
