use thiserror::Error;

/// Crate-wide error type. Variants map onto the exit codes of the command line
/// driver: usage and schema problems exit with 2, integrity problems with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("span corruption error: {0}")]
    Corruption(String),

    #[error("reconstruction error: {0}")]
    Reconstruction(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error on dataset `{dataset}`: {message}")]
    Training { dataset: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Schema(_) | Error::Config(_) | Error::Lookup(_) => 2,
            Error::Integrity(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
