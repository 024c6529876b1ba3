use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape or dimension was invalid for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument was outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An API contract was violated (wrong label value, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run or model configuration (bad variant, missing modality, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file was malformed. `offset` is the byte position of the
    /// first inconsistent byte.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A loaded sample violated a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Metric is undefined for the given inputs (e.g. single-class labels).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training was aborted because a non-finite value appeared.
    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
