use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("mesh topology error: {0}")]
    Topology(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate mapping at block {block} node ({i},{j}): J_inv = {jinv}")]
    Degenerate {
        block: usize,
        i: usize,
        j: usize,
        jinv: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
