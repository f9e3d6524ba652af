use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stagealloc::Error),
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("missing inputs: {}", .0.join(", "))]
    Missing(Vec<String>),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Exists(_) => "exists",
            CliError::Missing(_) => "missing",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON object written to stderr on failure.
    pub fn to_json(&self) -> String {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Missing(items) => body["missing"] = json!(items),
            CliError::Exists(p) => body["path"] = json!(p),
            CliError::Config { path, .. } => body["path"] = json!(path),
            CliError::Core(stagealloc::Error::Io { path, .. }) => body["path"] = json!(path),
            _ => {}
        }
        json!({ "error": body }).to_string()
    }
}
