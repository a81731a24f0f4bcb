//! Experiment runner for `osdg-core`: JSON configs, per-cell artifacts with
//! config-hash headers, staged execution and paired run comparison.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
