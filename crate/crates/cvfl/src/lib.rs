//! Experiment runner for compressed vertical federated learning: config
//! files, CSV input and output, threaded party execution and the `cvfl`
//! command line.

pub mod config;
pub mod csvio;
mod error;
pub mod exec;
pub mod experiment;
pub mod verify;

pub use config::{parse_config, CodecChoice, DatasetSource, ExperimentConfig, Overrides};
pub use error::{Error, Result};
pub use exec::Threaded;
pub use experiment::{comm_cost_report, run_experiment, CostRow};

use std::path::Path;

/// Reads and parses a config file.
pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
