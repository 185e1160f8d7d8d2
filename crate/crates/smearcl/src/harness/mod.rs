//! CLI plumbing: configuration, dataset persistence, model checkpoints,
//! resumable experiment execution and report emission.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentRecord, StopAfter};
pub use report::generate_report;
