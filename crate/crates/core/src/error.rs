use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model ladder: {0}")]
    Ladder(String),
    #[error("capacity violation: {0}")]
    Capacity(String),
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },
    #[error("file {path} has length {len}, not a multiple of record size {record}")]
    RecordSize {
        path: PathBuf,
        len: u64,
        record: u64,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("no reports found in {0}")]
    NoReports(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping of errors, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Runtime => 4,
            ErrorCategory::Io => 5,
        }
    }
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::Ladder(_) | Error::Capacity(_) | Error::Parameter(_) => {
                ErrorCategory::Config
            }
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::LabelRange { .. }
            | Error::RecordSize { .. }
            | Error::Corrupt(_)
            | Error::VersionMismatch { .. }
            | Error::NoReports(_) => ErrorCategory::Data,
            Error::Numeric(_) | Error::Shape(_) | Error::Divergence(_) => ErrorCategory::Runtime,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) => ErrorCategory::Io,
        }
    }
}
