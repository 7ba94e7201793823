//! Library side of the `scot` binary: config parsing/validation, the five
//! pipeline commands, and the small output writers. The binary in `main.rs`
//! only maps CLI arguments onto [`commands`] and converts [`error::CliError`]
//! into an exit code.

pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod manifest;
