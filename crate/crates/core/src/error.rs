use thiserror::Error;

pub type Result<T> = std::result::Result<T, DbaError>;

#[derive(Debug, Error)]
pub enum DbaError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("empty input")]
    EmptyInput,
    #[error("class {class} has no samples")]
    ZeroCountClass { class: usize },
    #[error("group (y={y}, s={s}) has no samples")]
    ZeroCountGroup { y: usize, s: usize },
    #[error("bad split fractions: {0}")]
    BadFractions(String),
    #[error("attributes are unknown for this dataset")]
    UnknownAttributes,
    #[error("class stratum {class} has {count} samples, need at least {needed}")]
    StratumTooSmall {
        class: usize,
        count: usize,
        needed: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("support violation at cell (x={x}, y={y}): test mass without training mass")]
    SupportViolation { x: usize, y: usize },
    #[error("zero denominator at cell (x={x}, y={y})")]
    ZeroDenominator { x: usize, y: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("no checkpoints to select from")]
    EmptyCheckpoints,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DbaError {
    /// True for errors caused by reading or writing files, as opposed to bad
    /// inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, DbaError::Io(_))
    }
}
