use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("precision-state error: {0}")]
    PrecisionState(String),

    #[error("unsupported cast to {0}; INT8 tensors are produced by the quantizer only")]
    UnsupportedCast(crate::tensor::Dtype),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("lookup error: no entry for `{0}`")]
    Lookup(String),

    #[error(
        "memory budget of {budget_bytes} bytes is infeasible; best achievable peak estimate is {best_peak_bytes} bytes"
    )]
    BudgetInfeasible {
        budget_bytes: u64,
        best_peak_bytes: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violation: {0}")]
    Internal(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 1 config, 2 data/format, 3 budget-infeasible, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Lookup(_) | Error::PrecisionState(_) => 1,
            Error::UnsupportedCast(_) => 1,
            Error::Dimension(_) | Error::Input(_) | Error::Format(_) | Error::Io { .. } => 2,
            Error::BudgetInfeasible { .. } => 3,
            Error::Internal(_) | Error::Stage { .. } => 4,
        }
    }
}
