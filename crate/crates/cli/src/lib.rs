//! Command implementations behind the `dualtrack` binary.

pub mod calibrate;
pub mod commands;
pub mod io;
pub mod sweep;

use std::fmt;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 2,
    Io = 3,
    Data = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        Self { code: ExitCode::Config, message: msg.to_string() }
    }
    pub fn io(msg: impl fmt::Display) -> Self {
        Self { code: ExitCode::Io, message: msg.to_string() }
    }
    pub fn data(msg: impl fmt::Display) -> Self {
        Self { code: ExitCode::Data, message: msg.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;
