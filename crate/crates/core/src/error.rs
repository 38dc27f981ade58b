use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate embedding: row {row} has norm {norm:e} below the floor")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter `{0}` is frozen")]
    FrozenParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("backbone digest changed during frozen phase: {before} -> {after}")]
    FrozenViolation { before: String, after: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid imbalance ratio {0}: must be >= 1")]
    InvalidRatio(f64),

    #[error("invalid Pareto power {0}: must be > 0")]
    InvalidPower(f64),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
