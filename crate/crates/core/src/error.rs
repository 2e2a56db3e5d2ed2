use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how the CLI maps them
/// to exit codes: configuration/argument problems, file problems, and
/// capability mismatches (asking a model for something it cannot do).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate roi: {0}")]
    DegenerateRoi(String),

    #[error("degenerate minibatch: no foreground or background candidates")]
    DegenerateBatch,

    #[error("graph already consumed by backward")]
    GraphConsumed,

    #[error("loss node must be scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown stuff class name: {0}")]
    UnknownStuffClass(String),

    #[error("missing segmentation labels: {0}")]
    MissingSegLabels(String),

    #[error("model capability mismatch: {0}")]
    Capability(String),

    #[error("checkpoint does not match spec: missing tensors [{missing}], unexpected tensors [{unexpected}]")]
    CheckpointMismatch { missing: String, unexpected: String },

    #[error("malformed file {path} at byte {offset}: {msg}")]
    Malformed {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<String>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
