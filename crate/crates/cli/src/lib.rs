//! Command-line experiments for `ctrldiffuse`: configuration, the
//! subcommands, and run manifests.

pub mod commands;
pub mod config;
mod error;
pub mod manifest;

pub use config::ExperimentConfig;
pub use error::CliError;
