use std::fmt;
use std::path::Path;

use hvqc::error::Error;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Usage(String),
    Io(String),
    Corrupt(String),
    Model(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Corrupt(_) => 4,
            CliError::Model(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Internal(m) => CliError::Internal(format!("{p}: {m}")),
            CliError::Usage(m) => CliError::Usage(format!("{p}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{p}: {m}")),
            CliError::Corrupt(m) => CliError::Corrupt(format!("{p}: {m}")),
            CliError::Model(m) => CliError::Model(format!("{p}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Internal(m) => write!(f, "internal error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Corrupt(m) => write!(f, "corrupt input: {m}"),
            CliError::Model(m) => write!(f, "model mismatch: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => CliError::Io(msg),
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::TruncatedData { .. }
            | Error::Checksum { .. }
            | Error::CorruptStream(_)
            | Error::Truncated { .. }
            | Error::InconsistentDims(_)
            | Error::IndexOutOfRange { .. }
            | Error::InvalidCodebook(_) => CliError::Corrupt(msg),
            Error::ModelMismatch(_) | Error::Dimension { .. } => CliError::Model(msg),
            Error::InvalidRatios(_) => CliError::Usage(msg),
            _ => CliError::Internal(msg),
        }
    }
}
