//! Command-line harness: configuration, checkpoints, metrics, reports and
//! the gen/search/retrain/eval pipeline.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
