//! Library side of the `lorac` binary: run configuration, output
//! directories, the subcommands and the finite-difference gradient suite.

pub mod commands;
pub mod gradcheck;
pub mod outdir;
pub mod run_config;

use std::fmt;
use std::path::PathBuf;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A failed command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    CheckFailed(String),
    Numeric { message: String, dump: Option<PathBuf> },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Numeric { .. } => EXIT_NUMERIC,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) => f.write_str(m),
            CliError::Numeric { message, dump: Some(p) } => {
                write!(f, "{message}; diagnostic dump at {}", p.display())
            }
            CliError::Numeric { message, dump: None } => f.write_str(message),
        }
    }
}

impl From<lorac::Error> for CliError {
    fn from(e: lorac::Error) -> Self {
        match e {
            lorac::Error::NonFinite { .. } => CliError::Numeric {
                message: e.to_string(),
                dump: None,
            },
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
