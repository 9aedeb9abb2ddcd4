use std::io;

use moesim::cost::{CalibrationError, ProfileError};
use moesim::engine::EngineError;
use moesim::tracegen::io::TraceIoError;
use moesim::tracegen::GenError;
use thiserror::Error;

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent input files.
    #[error("{0}")]
    Data(String),
    /// The simulator caught itself breaking one of its own invariants.
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: io::Error) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => CliError::Usage(m),
            e @ EngineError::Invariant { .. } => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Config(m) => CliError::Data(m.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TraceIoError> for CliError {
    fn from(e: TraceIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
