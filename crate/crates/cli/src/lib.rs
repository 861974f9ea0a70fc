//! Command implementations behind the `cpnet` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod viz;

pub use error::{CliError, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CPNET_THREADS";

/// Worker thread count from [`THREADS_ENV`]; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(e) => Err(CliError::invalid(format!("{THREADS_ENV}: {e}"))),
    }
}
