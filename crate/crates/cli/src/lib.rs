//! Experiment harness: config parsing, seeded multi-run orchestration,
//! metrics output and the transport demo.

pub mod checks;
pub mod config;
pub mod error;
pub mod problem;
pub mod runner;

pub use error::{CliError, ConfigError};
