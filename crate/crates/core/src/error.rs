use std::fmt;

/// Error type shared across the pipeline modules.
#[derive(Debug, Clone, PartialEq)]
pub enum SdError {
    /// Shape or extent mismatch between tensors / arrays.
    Dim(String),
    /// Invalid configuration value (ranks, sizes, temperatures, ...).
    Config(String),
    /// Malformed or out-of-contract data (non-finite inputs, bad indices, ...).
    Data(String),
    /// Contract violation in a training/inference call sequence.
    Contract(String),
    /// Parse failure with positional context.
    Parse(String),
    /// Filesystem / serialization failure.
    Io(String),
}

impl fmt::Display for SdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SdError::Dim(m) => write!(f, "dimension error: {m}"),
            SdError::Config(m) => write!(f, "configuration error: {m}"),
            SdError::Data(m) => write!(f, "data error: {m}"),
            SdError::Contract(m) => write!(f, "contract error: {m}"),
            SdError::Parse(m) => write!(f, "parse error: {m}"),
            SdError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for SdError {}

impl From<std::io::Error> for SdError {
    fn from(e: std::io::Error) -> Self {
        SdError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SdError>;
