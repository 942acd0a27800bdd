use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("SVD of {label} ({rows}x{cols}) did not converge")]
    SvdDidNotConverge {
        label: String,
        rows: usize,
        cols: usize,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("spectrum is empty")]
    EmptySpectrum,

    #[error("no layer points at step {0}")]
    NoPointsAtStep(u64),

    #[error("attention row (head {head}, query {query}) sums to {sum}, not 1")]
    Unnormalized { head: usize, query: usize, sum: f64 },

    #[error("non-finite attention logit at head {head}, query {query}, key {key}")]
    NonFiniteLogit { head: usize, query: usize, key: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Problems with the contents of a checkpoint or metrics file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"NTENSOR1\"")]
    BadMagic([u8; 8]),

    #[error("truncated file: need {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: u64,
        needed: u64,
        len: u64,
    },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}`: shape {shape:?} as {dtype} needs {expected} bytes, header says {actual}")]
    ByteCountMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("malformed header line {line}: {reason}")]
    Header { line: usize, reason: String },

    #[error("malformed metrics row {row}: {reason}")]
    Metrics { row: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}
