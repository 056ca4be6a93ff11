//! Command-line front end: configuration, verb dispatch and file outputs.

pub mod config;
pub mod error;
pub mod verbs;

pub use config::{parse_config, RunConfig, Verb};
pub use error::{Category, CliError};
pub use verbs::{run, Artifacts};
