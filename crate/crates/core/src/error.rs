use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("replay error: {0}")]
    Replay(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyBatch(_) => "empty_batch",
            Error::Parse(_) => "parse",
            Error::Codec(_) => "codec",
            Error::Env(_) => "env",
            Error::Replay(_) => "replay",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
