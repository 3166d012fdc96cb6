//! Instance ingestion, experiment runner and report emission.

pub mod config;
pub mod error;
pub mod experiment;
pub mod svg;
pub mod trace;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{render_report, run_experiment};
