//! Command-line front end for the `s4mil` library.

pub mod app;
pub mod config;
pub mod error;
pub mod heatmap;

pub use app::{run, Cli};
pub use error::{CliError, CliResult};
