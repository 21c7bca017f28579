//! Files, configuration, plots, and the command-line driver around
//! `coda-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
mod error;
pub mod idx;
pub mod metrics;
pub mod plot;

pub use error::{Error, Result};
