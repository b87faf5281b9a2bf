use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants carry enough context to
/// locate the offending header key, cell, month or level.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at time row {row}, active cell {cell}")]
    NonFiniteValue { row: usize, cell: usize },
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no time entries for group {0}")]
    EmptyGroup(String),
    #[error("groups do not match: {0}")]
    GroupMismatch(String),
    #[error("fine pixel {pixel} at ({lon}, {lat}) lies outside the coarse grid")]
    OutOfDomain { pixel: usize, lon: f64, lat: f64 },
    #[error("fine pixel {pixel} has no usable coarse neighbour")]
    MissingNeighbor { pixel: usize },
    #[error("invalid split rule: {0}")]
    InvalidRule(String),
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },
    #[error("objective increased from {previous} to {current} at outer iteration {iteration}")]
    Diverged {
        iteration: usize,
        previous: f64,
        current: f64,
    },
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window {window} larger than map {rows}x{cols}")]
    WindowTooLarge {
        window: usize,
        rows: usize,
        cols: usize,
    },
    #[error("masked pixel inside SSIM region at row {row}, col {col}")]
    MaskedPixel { row: usize, col: usize },
    #[error("model missing: {0}")]
    ModelMissing(String),
    #[error("month {0} outside the available range")]
    MonthOutOfRange(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with a location such as a season or month.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn not_pd(what: impl Into<String>) -> Self {
        Error::NotPositiveDefinite { what: what.into() }
    }
}
