//! Files, configuration and the command line around `waypoint-core`.
//!
//! - [`config`]: the TOML experiment file and its hashes
//! - [`io`]: dataset, report and log files
//! - [`checkpoint`]: versioned binary checkpoints
//! - [`pipeline`]: the `gen`, `pretrain`, `finetune`, `eval` and `ablate` stages

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
