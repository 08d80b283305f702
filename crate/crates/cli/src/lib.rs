//! Library side of the `evseg` command-line tool.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{DataConfig, EvalConfig, KFold, RunConfig, EFFECTIVE_CONFIG, SEED_ENV};
