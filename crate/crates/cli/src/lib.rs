//! Library side of the `crop` command line: experiment config parsing and
//! the subcommand implementations, kept out of `main` so tests can call
//! them directly.

pub mod commands;
pub mod config;

pub use commands::{diagnose, evaluate, exit_code, personalize, train_generic, Layout, Method};
pub use config::ExperimentConfig;
