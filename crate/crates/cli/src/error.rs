use std::fmt;

use oracle_al::Error;

/// CLI failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Missing(String),
    /// Exit code 4.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) => write!(f, "missing prerequisite: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidSynthetic(_)
            | Error::SplitTooLarge { .. }
            | Error::InvalidLearner(_)
            | Error::InvalidAcquisition(_)
            | Error::InvalidDistribution(_)
            | Error::PoolTooSmall { .. }
            | Error::InvalidBins(_)
            | Error::InvalidSearch(_)
            | Error::ConfigMismatch(_) => CliError::Config(msg),
            Error::MissingInput(_) => CliError::Missing(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
