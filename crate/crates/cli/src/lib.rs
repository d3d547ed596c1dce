pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod manifest;

pub use commands::{execute, run, Command, Common, Split};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::Manifest;
