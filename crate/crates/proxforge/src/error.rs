//! Error type shared across the crate.

/// Crate-wide error enum.
///
/// Variants are grouped by failure class rather than by module so that
/// callers can match on the kind of problem without knowing which layer
/// produced it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors that must live in the same space do not.
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    /// A shape is empty, has a zero extent, or disagrees with a data length.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A scheme or step-size configuration violates a structural invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The requested operation is not defined for this variant.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// An iterative routine failed to reach its target accuracy.
    #[error("not converged: {0}")]
    NotConverged(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON encode/decode failure.
    #[error("json error: {0}")]
    Json(String),

    /// CSV encode/decode failure, including strict-format violations.
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
