//! Config-driven experiment runner: builds split and subsampled training
//! sets, trains detectors, evaluates them over repeated query draws and
//! writes gap reports and curve data.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{BenchError, ExitStatus};
pub use experiment::run_experiment;
pub use report::ReportBundle;
