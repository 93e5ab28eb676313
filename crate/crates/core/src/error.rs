use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("training diverged: non-finite activations first seen in sparsification stage {stage}")]
    Divergence { stage: usize },

    #[error("decision mask keeps no tokens; the class token must always be kept")]
    EmptyMask,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("missing teacher checkpoint at {path}; run `train-teacher` first or pass `--train-teacher`")]
    MissingTeacher { path: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::EmptyMask => "empty_mask",
            Error::Config(_) => "config",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::MissingTeacher { .. } => "missing_teacher",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
