use std::io;
use std::path::{Path, PathBuf};

/// Errors from file formats, IO and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: bad magic bytes at offset {offset}", path.display())]
    BadMagic { path: PathBuf, offset: u64 },
    #[error("{}: file ends at offset {offset}, expected {expected} bytes", path.display())]
    TruncatedFile {
        path: PathBuf,
        offset: u64,
        expected: u64,
    },
    #[error("{}: non-finite value at offset {offset}", path.display())]
    NonFiniteValue { path: PathBuf, offset: u64 },
    #[error("{}: unsupported format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{}: malformed at offset {offset}: {reason}", path.display())]
    Malformed {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("file `{}` referenced by the manifest does not exist", .0.display())]
    MissingFile(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error("gradient check failed: max relative error {max:.3e} >= {tolerance:.0e}")]
    GradCheckFailed { max: f64, tolerance: f64 },
    #[error(transparent)]
    Core(#[from] adafusion_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use adafusion_core::Error as C;
        match self {
            Error::Core(C::NonFiniteLoss(_)) | Error::GradCheckFailed { .. } => 3,
            Error::Core(_)
            | Error::Invalid(_)
            | Error::NonFiniteValue { .. }
            | Error::Json { .. } => 2,
            Error::BadMagic { .. }
            | Error::TruncatedFile { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::MissingFile(_) => 4,
        }
    }
}
