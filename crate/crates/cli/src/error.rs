use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[source] spg_core::Error),
    #[error("missing {artifact}; run `spg {subcommand}` first")]
    Dependency { artifact: PathBuf, subcommand: &'static str },
    #[error("{path} already exists with different contents; artifacts are never overwritten")]
    Conflict { path: PathBuf },
    #[error("{path} was written under config {found}, not {expected}")]
    Provenance { path: PathBuf, found: String, expected: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] spg_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dependency { .. } => "dependency",
            CliError::Conflict { .. } => "conflict",
            CliError::Provenance { .. } => "provenance",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Core(_) => "run",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Conflict { .. } | CliError::Provenance { .. } => 4,
            _ => 1,
        }
    }

    /// Machine-readable report printed to stderr on failure.
    pub fn report(&self) -> serde_json::Value {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Dependency { artifact, subcommand } => {
                err["required_subcommand"] = json!(subcommand);
                err["path"] = json!(artifact);
            }
            CliError::Conflict { path } | CliError::Io { path, .. } | CliError::Json { path, .. } => {
                err["path"] = json!(path);
            }
            CliError::Provenance { path, found, expected } => {
                err["path"] = json!(path);
                err["found_hash"] = json!(found);
                err["expected_hash"] = json!(expected);
            }
            CliError::Config(_) | CliError::Core(_) => {}
        }
        json!({ "error": err })
    }
}
