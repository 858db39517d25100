use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("input contains no trajectory rows")]
    EmptyInput,

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("point ({lat}, {lon}) lies outside the bounding box")]
    OutOfBounds { lat: f64, lon: f64 },

    #[error("trajectory cannot be decomposed: {hits} subgoal hit(s), need at least 2")]
    Segmentation { hits: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unknown subgoal node {0}")]
    UnknownNode(usize),

    #[error("transition {from} -> {to} is not an edge of the subgoal graph")]
    OffGraphTransition { from: usize, to: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forging failed: {0}")]
    Forge(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
