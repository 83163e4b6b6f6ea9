use thiserror::Error;

#[derive(Debug, Error)]
pub enum PsgrError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("node {0} is not in the uncertain set")]
    NotUncertain(usize),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PsgrError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PsgrError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        PsgrError::InvalidInput(detail.into())
    }

    /// Coarse error category, used by the command-line front end for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            PsgrError::NonFinite { .. } | PsgrError::Diverged { .. } => ErrorCategory::Numeric,
            PsgrError::Io(_) => ErrorCategory::Io,
            _ => ErrorCategory::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numeric,
    Io,
}

pub type Result<T, E = PsgrError> = std::result::Result<T, E>;
