//! Command-line front end for `geoconfound-core`: TOML run configuration,
//! CSV / ASCII-grid / mesh-text IO and rayon-parallel drivers.

pub mod commands;
pub mod config;
pub mod io;
pub mod runner;

/// Failure of a command; the variant fixes the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Configuration or input schema problem (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Model or runtime failure (exit 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
