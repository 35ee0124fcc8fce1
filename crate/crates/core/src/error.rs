use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Position-carrying diagnostic from the caption and query parsers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at position {position}")]
pub struct ParseError {
    /// Character offset into the input where the problem was detected.
    pub position: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(position: usize, message: impl Into<String>) -> Self {
        Self {
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward root is not gradient-tracked")]
    NotTracked,
    #[error("zero-norm row {row} in {op}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{what} has shape {found:?}, the configuration expects {expected:?}")]
    ParamShape {
        what: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("edge references undeclared stream `{0}`")]
    UndeclaredStream(String),
    #[error("dangling visual reference: scene {scene_id} has no annotation {ann_id}")]
    DanglingReference { scene_id: u64, ann_id: u64 },
    #[error("region {0:?} lies outside the image grid or is empty")]
    BadRegion([usize; 4]),

    #[error("all targets excluded for source row {0}")]
    AllExcluded(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("missing output for active loss term `{0}`")]
    MissingOutput(&'static str),
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid annotation reply: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("annotation client failed after {attempts} attempt(s): {message}")]
    Client { attempts: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(
        "config hash mismatch: checkpoint {found}, expected {expected} (use --force to override)"
    )]
    ConfigHash { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
