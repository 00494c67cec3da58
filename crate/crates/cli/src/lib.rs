//! Command implementations behind the `dan` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
