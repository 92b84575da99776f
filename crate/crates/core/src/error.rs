use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RigError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("degenerate rotation: {0}")]
    DegenerateRotation(&'static str),

    /// A type invariant does not hold; `field` names the offending item.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("rig format: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The fit objective became non-finite; `last_state` is the last finite iterate.
    #[error("fit diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        last_state: Box<crate::body_model::ModelInputs>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        RigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        RigError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RigError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite values or divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, RigError::Numeric(_) | RigError::DegenerateRotation(_) | RigError::Diverged { .. })
    }
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(RigError::dims(what, expected, got))
    } else {
        Ok(())
    }
}
