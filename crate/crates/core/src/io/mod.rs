//! Checkpoints, run configuration and the subcommand runner behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod runner;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::RunConfig;
