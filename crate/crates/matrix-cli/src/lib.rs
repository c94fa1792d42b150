//! Library half of the `matrix` binary: run-config parsing and the command
//! implementations, exposed so integration tests can exercise them directly.

pub mod commands;
pub mod config;
