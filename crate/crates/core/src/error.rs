use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument outside the domain of an operation (non-positive scale, bad permutation).
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite intermediate values or a failed decomposition.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A documented precondition does not hold at the given point.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Internal consistency check failed; usually means unsorted input or a bug upstream.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
