//! Command implementations behind the `delaysched` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};

/// Default directory for simulation output when no flag or config sets one.
pub const OUTPUT_DIR_ENV: &str = "DELAYSCHED_OUTPUT_DIR";
