use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. `detail` names the
    /// offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Elementwise domain violation (e.g. log of a non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A row to be normalized has (near-)zero norm, or an embedding is not
    /// unit-norm where one is required.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Backward was called on a tape that has already been consumed.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// Backward was called on a tape with no recorded operations.
    #[error("backward on an empty tape")]
    EmptyTape,

    /// Backward requires a scalar loss.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A parameter or loss became non-finite (NaN/Inf).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Checkpoint or index file is malformed.
    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    /// Checkpoint or index file has an unsupported format version.
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Loaded parameter set does not match the model.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Image decode/encode failure.
    #[error("image codec error: {0}")]
    Codec(String),

    /// Invalid image construction or out-of-bounds crop.
    #[error("invalid image operation: {0}")]
    InvalidImage(String),

    /// Configuration file problem, with a 1-based line number when known.
    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    /// Dataset-level problem (empty root, unreadable files, missing ids).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
