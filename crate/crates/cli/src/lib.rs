//! Harness library behind the `stremn` binary: configuration layering,
//! training/evaluation loops, the complexity benchmark, and the memory
//! retention analysis.

pub mod analyze;
pub mod average;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod rollout;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
