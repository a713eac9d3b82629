use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid value for {what}: {value}")]
    InvalidValue { what: &'static str, value: f64 },

    #[error("{what} must lie in {domain}, got {value}")]
    Domain {
        what: &'static str,
        domain: &'static str,
        value: f64,
    },

    /// A numerical failure. Carries the offending matrix when one is involved.
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        matrix: Option<Box<DMatrix<f64>>>,
    },

    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            matrix: None,
        }
    }

    pub(crate) fn numerical_with(message: impl Into<String>, matrix: &DMatrix<f64>) -> Self {
        Error::Numerical {
            message: message.into(),
            matrix: Some(Box::new(matrix.clone())),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a bad configuration rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Config { .. })
    }
}
