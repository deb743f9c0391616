use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: input is empty")]
    EmptyInput { path: PathBuf },

    #[error("{path}:{line}: expected {expected} values, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: cannot parse {token:?} as a number")]
    Parse {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("card integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// True for failures caused by bad input data rather than numerics or IO.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyInput { .. }
                | Error::RaggedRow { .. }
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Validation(_)
                | Error::Argument(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }

    pub fn is_numerical_error(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Numerical(_))
    }
}
