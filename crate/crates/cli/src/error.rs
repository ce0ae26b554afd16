use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failures split by exit code: configuration problems are 2, everything
/// that goes wrong after validation is 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] texmesh::Error),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: texmesh::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

/// Attach a file path to a core error.
pub(crate) fn at_path<T>(path: &std::path::Path, r: texmesh::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })
}
