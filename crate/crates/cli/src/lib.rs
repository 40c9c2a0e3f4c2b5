//! Command-line driver: configuration files, metrics logs, checkpoints and
//! plots around the `swr-core` protocols.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics_log;
pub mod plot;

pub use error::{CliError, Result};
