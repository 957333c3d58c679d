//! Experiment driver for the discond toolkit: configs and presets, training,
//! evaluation and traversal grids.

pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod selftest;
pub mod train;
pub mod traverse;

pub use config::{preset, presets, Dataset, EvalSettings, RunConfig};
pub use datasets::DataPaths;
pub use error::{CliError, CliResult};
pub use eval::{load_model, run_eval};
pub use train::{run_train, RunDir, TrainState, TrainSummary};
pub use traverse::run_traverse;
