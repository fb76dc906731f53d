use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received non-finite or out-of-domain values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Synthetic dataset generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// An input file does not conform to its expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
