//! Configuration, orchestration and output for the `diracsc` binary.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, ConfigError, RunConfig};
pub use run::{execute, CliError, Command, RunReport};
