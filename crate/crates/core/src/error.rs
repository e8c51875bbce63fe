use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("histogram has fewer than two occupied bins (constant image)")]
    DegenerateHistogram,

    #[error("AUC is undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("sensitivity/specificity undefined: truth contains a single class")]
    SingleClassTruth,

    #[error("DeLong variance is zero while AUCs differ ({auc_a} vs {auc_b})")]
    ZeroVariance { auc_a: f64, auc_b: f64 },

    #[error(
        "correlation matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e}); \
         nearest PSD correlation matrix: {suggestion:?}"
    )]
    NotPositiveSemidefinite {
        min_eigenvalue: f64,
        suggestion: Vec<Vec<f64>>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("no results found in {0}")]
    NoResults(PathBuf),
}

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DegenerateHistogram
            | Error::UndefinedAuc
            | Error::ZeroVariance { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::NonFinite(_)
            | Error::Diverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
