use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("weight store does not match config: {0}")]
    WeightStore(String),

    #[error("numeric divergence: first non-finite output at `{layer}`")]
    Divergence { layer: String },

    #[error("token id {token} at position {position} is out of range for vocab size {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("cannot fuse {flavor} model: {reason}")]
    Fusion { flavor: String, reason: String },

    #[error("quantization rejected: {0}")]
    Quantization(String),

    #[error("cannot parse `{input}` at position {position}: {message}")]
    Parse {
        input: String,
        position: usize,
        message: String,
    },

    #[error("container: {0}")]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failures decoding a weight container. Each corruption mode is distinct so
/// callers can tell a wrong file from a damaged one.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"FFWT\"")]
    BadMagic { found: [u8; 4] },

    #[error("version mismatch: file has {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: String,
        needed: u64,
        available: u64,
    },

    #[error("tensors `{first}` and `{second}` overlap in the payload")]
    OffsetOverlap { first: String, second: String },

    #[error("tensor `{name}` offset {offset} is not 64-byte aligned")]
    Misaligned { name: String, offset: u64 },

    #[error("tensor `{name}`: nbytes {nbytes} does not match dtype and shape ({expected})")]
    SizeMismatch {
        name: String,
        nbytes: u64,
        expected: u64,
    },

    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    DType {
        name: String,
        found: String,
        expected: String,
    },

    #[error("header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
