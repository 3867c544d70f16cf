use thiserror::Error;

pub type Result<T> = std::result::Result<T, GdmError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdmError {
    #[error("shape mismatch in {op}: lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { value: f64, index: usize },

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("point is not on the simplex: {0}")]
    NotOnSimplex(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is rank deficient (condition number {condition:e}): {what}")]
    RankDeficient { what: String, condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GdmError {
    fn from(e: std::io::Error) -> Self {
        GdmError::Io(e.to_string())
    }
}

impl From<csv::Error> for GdmError {
    fn from(e: csv::Error) -> Self {
        GdmError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for GdmError {
    fn from(e: serde_json::Error) -> Self {
        GdmError::Checkpoint(e.to_string())
    }
}
