use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with L2 norm {norm:e}")]
    ZeroVector { norm: f64 },
    #[error("index {index} out of range for {len} keys")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("softmax over an empty key set")]
    EmptyKeySet,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("parameter layouts differ: {left:?} vs {right:?}")]
    LayoutMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("distance matrix is not symmetric at ({row}, {col})")]
    NonSymmetricInput { row: usize, col: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("batch item {0} carries a noise label")]
    NoisyLabelInBatch(usize),
    #[error("pseudo-identity {label} has a single instance in the batch (item {item})")]
    IdentityWithSingleInstance { item: usize, label: i64 },
    #[error("no stored prototypes")]
    EmptyPrototypeStore,
    #[error("batch of {0} is too small")]
    BatchTooSmall(usize),
    #[error("both new and old cluster counts are zero")]
    BothEmpty,
    #[error("memory buffer is empty")]
    EmptyBuffer,
    #[error("no clusters available for batch sampling")]
    NoClusters,
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no query has a valid positive in the gallery")]
    NoValidQueries,
    #[error("snapshot is for domain {snapshot}, queries are from domain {query}")]
    DomainMismatch { snapshot: usize, query: usize },
    #[error("no valid (anchor, positive, negative) triplet exists")]
    NoValidTriplets,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("encoding error: {0}")]
    Encoding(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for configuration problems, false for runtime or IO failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::InvalidSpec(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Encoding(_)
                | Error::UnsupportedVersion { .. }
                | Error::MalformedRow { .. }
                | Error::HeaderMismatch(_)
        )
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Encoding(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Encoding(e.to_string())
    }
}
