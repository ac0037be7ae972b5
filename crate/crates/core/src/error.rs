use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The CLI maps these onto process exit
/// codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: manifest missing in {dir}")]
    ManifestMissing { what: &'static str, dir: PathBuf },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("checksum mismatch in {what}")]
    Checksum { what: String },

    #[error("{what} version mismatch: found {found}, expected {expected}")]
    VersionMismatch {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("numerical divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 check failure, 2 configuration, 3 IO or corrupt
    /// file, 4 numerical divergence, 5 version mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Shape(_)
            | Error::Config(_)
            | Error::Param(_)
            | Error::Usage(_)
            | Error::Index(_)
            | Error::Dataset(_)
            | Error::Evaluation(_) => 2,
            Error::Io { .. }
            | Error::ManifestMissing { .. }
            | Error::Format { .. }
            | Error::Checksum { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::VersionMismatch { .. } => 5,
        }
    }
}
