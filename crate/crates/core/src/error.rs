use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty vocabulary")]
    EmptyVocab,

    #[error("patient {patient}: visit {visit:?} is not in the vocabulary")]
    OutOfVocab { patient: String, visit: Vec<String> },

    #[error("invalid stochastic matrix {name}: row {row} sums to {sum}")]
    InvalidStochasticMatrix { name: String, row: usize, sum: f64 },

    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },

    #[error("numerical failure in {term}")]
    Numerical { term: String },

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("conditional generation requires evac")]
    ConditionalRequiresEvac,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl EvaError {
    pub fn numerical(term: impl Into<String>) -> Self {
        EvaError::Numerical { term: term.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        EvaError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user-supplied configuration rather
    /// than a runtime or numerical failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            EvaError::Config(_)
                | EvaError::InvalidArgument(_)
                | EvaError::UnknownCondition(_)
                | EvaError::ConditionalRequiresEvac
                | EvaError::InvalidStochasticMatrix { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, EvaError>;
