use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum GemsError {
    #[error("non-finite value in {context} at ({row}, {col})")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("rank {rank} out of range (max {max})")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("degenerate gradient: zero-norm operand in {0}")]
    DegenerateGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GemsError> = std::result::Result<T, E>;

impl GemsError {
    pub(crate) fn shape(context: impl Into<String>, expected: (usize, usize), found: (usize, usize)) -> Self {
        GemsError::ShapeMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
