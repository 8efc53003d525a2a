use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("no modality present for fusion")]
    NoInput,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// Failures while reading datasets or checkpoints from disk.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{context}: missing file {path}")]
    MissingFile { context: String, path: PathBuf },
    #[error("{context}: bad magic")]
    BadMagic { context: String },
    #[error("{context}: image is not square ({width}x{height})")]
    NonSquare {
        context: String,
        width: usize,
        height: usize,
    },
    #[error("{context}: unsupported maxval {maxval} (expected 255)")]
    BadMaxval { context: String, maxval: usize },
    #[error("{context}: label {label:?} is not 0 or 1")]
    BadLabel { context: String, label: String },
    #[error("{context}: malformed header: {detail}")]
    BadHeader { context: String, detail: String },
    #[error("{context}: non-numeric value {value:?}")]
    NonNumeric { context: String, value: String },
    #[error("subject {subject}: ragged timesteps {found:?}")]
    RaggedTimesteps { subject: String, found: Vec<usize> },
    #[error("subject {subject} (row {row}): inconsistent label")]
    InconsistentLabel { subject: String, row: usize },
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("{context}: {detail}")]
    Malformed { context: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
