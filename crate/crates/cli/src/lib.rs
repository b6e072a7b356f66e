//! Command-line driver: configuration, checkpoints, metrics export and the
//! evaluation protocol.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
