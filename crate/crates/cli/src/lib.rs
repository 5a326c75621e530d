//! Command-line experiment runner and HTTP annotation service for the
//! `avtag` tagger.

pub mod commands;
pub mod data;
pub mod error;
pub mod service;

pub use error::{CliError, CliResult};
