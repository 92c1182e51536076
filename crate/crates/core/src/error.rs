use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("fse_step handles single-loop cells only (got {loops} loops); use fse_step_multi")]
    MultiLoop { loops: usize },

    #[error("unknown {kind} `{token}`")]
    UnknownName { kind: &'static str, token: String },

    #[error("step {step} out of range for a tape of {len} steps")]
    StepOutOfRange { step: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn length(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::LengthMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}
