//! Command surface of the pipeline: configuration loading, the on-disk
//! layout of a run, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;

pub use commands::{evaluate, phantom, predict, preprocess, run_all, train};
pub use config::RunConfig;
pub use error::CliError;
pub use layout::{phantom_case_paths, Layout};
