use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("action index {index} out of range for stage {stage} with {size} actions")]
    ActionOutOfRange {
        stage: usize,
        index: usize,
        size: usize,
    },
    #[error("dataset support violated: {0}")]
    Support(String),
    #[error("load test saturated: utilization {p_percent:.2}% at {qps} qps; lower the qps")]
    Saturated { p_percent: f64, qps: f64 },
    #[error("model not fitted: {0}")]
    NotFitted(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::ActionOutOfRange { .. } => "action_out_of_range",
            Error::Support(_) => "support",
            Error::Saturated { .. } => "saturated",
            Error::NotFitted(_) => "not_fitted",
            Error::Infeasible(_) => "infeasible",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
