use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing contextual embedding for key `{0}`")]
    MissingEmbedding(String),

    #[error("training diverged at epoch {epoch}, step {step}, batch {batch}: loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        batch: usize,
        loss: f64,
    },

    #[error("io error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    /// True for failures caused by the caller's inputs (bad files, configs,
    /// arguments) rather than by the numerics.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Shape { .. }
        )
    }
}
