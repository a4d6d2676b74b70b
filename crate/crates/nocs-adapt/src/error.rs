use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// Point configuration too small or rank-deficient for a pose solve.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// RANSAC found no hypothesis with enough inliers.
    #[error("no consensus: no hypothesis reached {min_inliers} inliers over {hypotheses} hypotheses")]
    NoConsensus {
        min_inliers: usize,
        hypotheses: usize,
    },
    /// A mask or filter left no points to operate on.
    #[error("empty selection: {0}")]
    EmptySelection(String),
    /// Paired containers disagree in length or bin count.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// An instance declared a class id outside the declared class set.
    #[error("unknown class: {0}")]
    UnknownClass(String),
    /// A generation spec has an empty or inverted range.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    /// A training loss went NaN or infinite.
    #[error("non-finite loss at {context}: {value}")]
    NonFiniteLoss { context: String, value: f64 },
    /// Invalid argument outside the cases above.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A checkpoint or report file failed to parse.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
