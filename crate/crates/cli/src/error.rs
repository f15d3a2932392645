use std::fmt;

use balsens::Error;
use serde::Serialize;

/// Everything a command can fail with, mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Input table does not match the expected columns or types.
    Schema(String),
    /// Bad flags or config file.
    Config(String),
    /// Failure writing outputs.
    Io(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Schema(_) => "SCHEMA_ERROR",
            CliError::Config(_) => "CONFIG",
            CliError::Io(_) => "IO_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::NotBracketed { .. }) => 4,
            CliError::Core(e) if e.is_solver_error() => 3,
            CliError::Core(_) | CliError::Schema(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 1,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        let report = Report { error: self.code(), message: self.to_string(), exit_code: self.exit_code() };
        serde_json::to_string(&report).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.code()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Schema(m) | CliError::Config(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
