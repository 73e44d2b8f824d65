use std::path::PathBuf;

use pairgan_core::CoreError;
use pairgan_nets::NetError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what}: {snapshot}")]
    NonFinite { what: &'static str, snapshot: String },
    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Grid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.into(), source }
}
