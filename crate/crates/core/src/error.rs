use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("matmul dimension mismatch: {left:?} x {right:?}")]
    DimensionMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("buffer of shape {shape:?} needs {expected} elements, got {got}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at index {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: u64, max: u64 },

    #[error("unknown objective {id} (optimizer tracks {count})")]
    UnknownObjective { id: usize, count: usize },

    #[error("expected a 2-D parameter, got shape {0:?}")]
    NotMatrix(Vec<usize>),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{0}")]
    Rejected(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
