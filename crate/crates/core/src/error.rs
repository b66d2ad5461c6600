use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: temporal extent {got} is smaller than kernel depth {kernel}")]
    InsufficientTemporal {
        op: &'static str,
        got: usize,
        kernel: usize,
    },

    #[error("{op}: value {value} at index {index} outside the open interval (0, 1)")]
    ProbabilityRange { op: &'static str, index: usize, value: f64 },

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("variable does not belong to this tape")]
    ForeignVariable,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expected {expected} frames, got {got}")]
    FrameCount { expected: usize, got: usize },

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("scene generation failed: {0}")]
    Placement(String),

    #[error("malformed record at line {line}: {detail}")]
    Record { line: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
