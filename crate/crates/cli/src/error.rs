use std::fmt;

use modelbridge::{ErrorKind, ProtocolError};
use modelbridge_uq::UqError;

#[derive(Debug)]
pub enum CliError {
    /// The run started but did not complete.
    Failed(String),
    Usage(String),
    Resource(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Resource(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) | CliError::Usage(m) | CliError::Resource(m) => f.write_str(m),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e.kind {
            ErrorKind::Unavailable => CliError::Resource(e.to_string()),
            ErrorKind::ModelFailure => CliError::Failed(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<UqError> for CliError {
    fn from(e: UqError) -> Self {
        match e {
            UqError::Model(p) => p.into(),
            UqError::Evaluation { ref source, .. } if source.kind == ErrorKind::Unavailable => {
                CliError::Resource(e.to_string())
            }
            UqError::Evaluation { .. } | UqError::RejectionCap(_) => CliError::Failed(e.to_string()),
            UqError::Io(_) | UqError::Csv(_) => CliError::Resource(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Resource(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Resource(e.to_string())
    }
}
