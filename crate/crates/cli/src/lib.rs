//! Command-line front end: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use causal_cxr::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error("property check failed: {0}")]
    PropertyFailed(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::PropertyFailed(_) => EXIT_PROPERTY,
            Self::Core(e) => match e {
                Error::Config(_)
                | Error::Spec(_)
                | Error::Contract(_)
                | Error::Dimension { .. }
                | Error::Shape { .. }
                | Error::Geometry { .. } => EXIT_USAGE,
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}
