//! Library half of the tsdiff binary: config schema and subcommand
//! implementations, exposed so integration tests can drive them directly.

pub mod commands;
pub mod config;
