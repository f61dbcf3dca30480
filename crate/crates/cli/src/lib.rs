//! Library surface of the specns command-line tool: run configuration,
//! on-disk formats, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod formats;
