use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(
        "infeasible CTC pair: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats"
    )]
    Infeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding the binary checkpoint and dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed entry: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
