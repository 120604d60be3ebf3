//! File-based pipeline around `diffad_core`: configuration, corpus and
//! model persistence, and the commands behind the `diffad` binary.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod forest;
pub mod fsutil;
pub mod imageio;
pub mod manifest;
pub mod pipeline;

pub use error::{CliError, Result};
