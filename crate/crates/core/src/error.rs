use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}

/// Failures while reading, validating or splitting a dataset.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("{extra} trailing bytes after declared payload")]
    TrailingBytes { extra: usize },

    #[error("header declares an empty dimension (n={n}, d={d}, l={l})")]
    EmptyDimension { n: usize, d: usize, l: usize },

    #[error("label byte {value} at row {row} is not 0/1")]
    InvalidLabel { row: usize, value: u8 },

    #[error("image {id} has no positive label")]
    NoPositiveLabel { id: u64 },

    #[error("non-finite feature at row {row}")]
    NonFiniteFeature { row: usize },

    #[error("duplicate image id {0}")]
    DuplicateId(u64),

    #[error("csv: {0}")]
    Csv(String),

    #[error("class {class} has {have} images, {need} required")]
    InsufficientClass { class: usize, have: usize, need: usize },

    #[error("image {id} has no similar peer in the training set")]
    NoPositivePeer { id: u64 },

    #[error("image {id} has no dissimilar peer in the training set")]
    NoNegativePeer { id: u64 },

    #[error("index {index} out of range for {len} images")]
    IndexOutOfRange { index: usize, len: usize },
}
