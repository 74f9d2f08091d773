//! Experiment drivers, reports, checkpoints and the command line.

pub mod checkpoint;
pub mod cli;
pub mod experiments;
pub mod report;

pub use checkpoint::{load_model, save_model, save_outcome, Checkpoint};
pub use experiments::{run_experiment, DeskSetup, ModelCache};
pub use report::ExperimentReport;
