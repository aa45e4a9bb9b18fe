use thiserror::Error;

/// Error type shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a domain invariant (bad spec, bad config, bad parameter).
    #[error("validation error: {0}")]
    Validation(String),

    /// Shapes or dimensions of two inputs do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A requested operation would exceed a configured resource budget.
    #[error("resource refusal: estimated {estimate_bytes} bytes exceeds budget of {budget_bytes} bytes")]
    ResourceLimit {
        estimate_bytes: u64,
        budget_bytes: u64,
    },

    /// Integer overflow in a size computation.
    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),

    /// Runtime numeric failure (e.g. pathological leakage, degenerate fit).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
