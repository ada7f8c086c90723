use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention mask row {row} has no permitted key")]
    FullyMaskedRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label sequence of length {labels} (needs {needed} frames) does not fit in {frames} frames")]
    Infeasible {
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("no tokens triggered: alignment collapses to an empty sequence")]
    NoTokens,

    #[error("token id {id} out of range for {classes} classes")]
    TokenRange { id: usize, classes: usize },

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),

    #[error("corrupt data in {path} at byte {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("empty reference")]
    EmptyReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
