//! Experiment orchestration: configuration, the seeded pipeline, sweeps and
//! the file-level commands behind the CLI.

mod commands;
mod config;
mod pipeline;
mod sweep;

pub use commands::*;
pub use config::*;
pub use pipeline::*;
pub use sweep::*;
