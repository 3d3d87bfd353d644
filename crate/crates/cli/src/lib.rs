//! Command-line surface of the FOCI stack.

pub mod args;
pub mod commands;
pub mod error;

pub use args::Cli;
pub use commands::run;
pub use error::CliError;
