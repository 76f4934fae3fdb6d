use thiserror::Error;

/// Errors shared across the pipeline modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rle counts sum {got} does not match height*width {expected}")]
    SumMismatch { got: u64, expected: u64 },

    #[error("cost matrix has no rows but {cols} columns to assign")]
    EmptyMatrix { cols: usize },

    #[error("no injective assignment exists: {cols} columns but only {rows} rows")]
    InfeasibleAssignment { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    DivergenceDetected(usize),

    #[error("frame id mismatch: {0}")]
    FrameIdMismatch(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("could not place instances: {0}")]
    PlacementFailure(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
