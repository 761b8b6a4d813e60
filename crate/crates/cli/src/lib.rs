//! Command-line front end: configuration, basis archives, tables and VTK output.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod vtk;

pub use config::{parse_config, Cli, Mode, RunConfig, Scheme};
pub use error::CliError;
