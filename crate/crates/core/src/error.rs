use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling failed after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: usize, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("{path}: directory exists and is not empty (pass overwrite to replace it)")]
    DirectoryNotEmpty { path: PathBuf },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command line tool: 1 usage, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::InvalidConfig(_) | Error::ConfigMismatch(_) => 1,
            Error::NonFinite(_) | Error::SamplingExhausted { .. } => 3,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::VersionMismatch { .. }
            | Error::Checksum { .. }
            | Error::Truncated(_)
            | Error::DirectoryNotEmpty { .. }
            | Error::Image { .. } => 2,
        }
    }
}
