//! Command-line front end: run configs, run directories and subcommands.

pub mod config;
pub mod jobs;

pub use config::RunConfig;
pub use jobs::{execute, rerun, Job};
