//! Command implementations behind the `meae` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod io;

pub use args::{Cli, Command};
pub use commands::run;
