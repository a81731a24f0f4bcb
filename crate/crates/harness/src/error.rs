use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] osdg_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} needs {}, which does not exist; run the {producer} stage first", artifact.display())]
    Dependency {
        stage: &'static str,
        producer: &'static str,
        artifact: PathBuf,
    },
    #[error("{}: written under config hash {found}, current config hashes to {expected}", path.display())]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("run grids differ: {0}")]
    GridMismatch(String),
    #[error("{failed} of {total} cells failed; first error: {first}")]
    CellsFailed {
        failed: usize,
        total: usize,
        first: String,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Csv { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
