//! Command line and HTTP/WebSocket gateway for the drmx remixer.

pub mod catalogue;
pub mod commands;
pub mod service;

pub use commands::{Cli, CliError, Command};
