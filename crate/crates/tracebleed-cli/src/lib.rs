//! Library surface of the pipeline CLI, exposed so integration tests can
//! drive stages directly.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::Config;
pub use error::{CliError, CliResult};
pub use stages::{run_stage, Stage};
