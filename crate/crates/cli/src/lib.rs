//! Command implementations behind the `mathflow` binary. Each command is a
//! plain function so integration tests drive them directly.

pub mod commands;
pub mod runner;

use std::fmt;

/// Command failure, split by exit code: data violations exit 1,
/// backend/infrastructure failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Data(String),
    Infra(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Infra(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(msg) | CliError::Infra(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}
