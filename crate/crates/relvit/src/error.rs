use std::path::PathBuf;

/// Unified error type for the whole crate.
///
/// Every failure is classified into one of four buckets so the CLI can map it
/// to a stable process exit code:
///
/// * [`Error::Usage`] / [`Error::Contract`] -> exit code 1 (bad flags, bad
///   config values, violated call contracts such as `m > n`),
/// * [`Error::Data`] / [`Error::Io`] / [`Error::Parse`] -> exit code 2
///   (missing or corrupt files, malformed records, truncated checkpoints),
/// * [`Error::Numeric`] -> exit code 3 (non-finite values, degenerate inputs
///   that make a computation meaningless).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller asked for something impossible (CLI flags, config values,
    /// or an API precondition such as `k` larger than the number of
    /// candidates).
    #[error("usage error: {0}")]
    Usage(String),

    /// An internal call contract was violated, e.g. mismatched shapes handed
    /// to a tensor op. Indicates a bug in the calling code rather than bad
    /// user input, but is reported through the same channel.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data exists but is malformed: bad JSON lines, unknown enum
    /// strings, checkpoint blobs of the wrong length, and so on.
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure, annotated with the path that was touched.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Serde-level failure while reading or writing a structured file.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    /// A computation produced or received non-finite numbers, or an input was
    /// numerically degenerate (e.g. zero-area boxes where an overlap ratio is
    /// required).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for this error per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Contract(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Parse { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }

    /// Convenience constructor that tags an `io::Error` with its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse { context: context.into(), message: message.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
