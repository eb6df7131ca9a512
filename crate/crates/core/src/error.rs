use std::path::PathBuf;

/// Errors raised anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{0}: file contains no events")]
    EmptyInput(PathBuf),

    #[error("cannot sample {requested} negatives from {available} candidate items")]
    VocabularyTooSmall { requested: usize, available: usize },

    #[error("unknown item id {0}")]
    UnknownItem(u64),

    #[error("missing category for item {0}")]
    MissingCategory(u64),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
