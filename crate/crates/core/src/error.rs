use std::io;

use thiserror::Error;

pub type Result<T, E = RfnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RfnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: String },

    #[error("normalization of an all-zero feature map is undefined")]
    DegenerateNormalization,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {term} is not finite")]
    Diverged {
        epoch: usize,
        batch: usize,
        term: String,
    },

    #[error("gradient check: loss is not finite when perturbing {param}[{index}]")]
    GradCheck { param: String, index: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RfnError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        RfnError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RfnError::InvalidArgument(msg.into())
    }
}
