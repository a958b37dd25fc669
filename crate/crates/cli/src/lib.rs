//! Command-line pipeline: data generation, base pretraining, focus
//! training and evaluation, plus the checkpoint and config formats.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{CliError, Options};
