use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid normalization stats: {0}")]
    InvalidStats(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable kebab-case identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidStats(_) => "invalid-stats",
            Error::Numerical(_) => "numerical",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::Format(_) => "format",
            Error::CorruptFile(_) => "corrupt-file",
            Error::TrainingFailure { .. } => "training-failure",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! invalid_input {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}

macro_rules! invalid_config {
    ($($arg:tt)*) => { $crate::error::Error::InvalidConfig(format!($($arg)*)) };
}

pub(crate) use invalid_config;
pub(crate) use invalid_input;
