use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed interaction line: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{entity} id {id} out of range (limit {limit})")]
    Bounds {
        entity: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("non-finite {what} at {table}[{row}, {col}]")]
    NonFinite {
        what: &'static str,
        table: &'static str,
        row: usize,
        col: usize,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: {msg}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
