use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate planar flow at layer {layer}: |1 + u'chi| = {value:e}")]
    DegenerateFlow { layer: usize, value: f64 },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("task spec error in {dir}: {message}")]
    TaskSpec { dir: PathBuf, message: String },
    #[error("{file}: row {row}: {message}")]
    Parse {
        file: PathBuf,
        row: usize,
        message: String,
    },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("format version {found} is newer than supported {supported}; migrate the file or upgrade")]
    FormatVersion { found: String, supported: String },
    #[error("non-finite value in {what}\n{dump}")]
    NonFinite { what: String, dump: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Autodiff(#[from] ndgrad::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
