use std::io;
use std::path::PathBuf;

use axisforge::diffusion::DiffusionError;
use axisforge::render::DegradationError;
use axisforge::GeometryError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("pose sampling gave up after {0} consecutive rejections")]
    DegenerateSamplingExhausted(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Degradation(#[from] DegradationError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("{failed} of {total} oracles failed")]
    OracleFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }

    /// Process exit code: 1 usage, 2 runtime failure, 3 oracle failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::OracleFailed { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
