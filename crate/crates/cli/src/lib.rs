//! Pipeline runner for the open-set diagnosis workbench.
//!
//! Every verb of the `osdx` binary is a stage function here; `reproduce`
//! chains them into complete Task 1 and Task 2 experiments.

pub mod config;
pub mod reproduce;
pub mod stages;

pub use config::{Combination, ExperimentConfig, Task, Task2Config};
pub use reproduce::{cmd_reproduce, ReplicateReport, ReproduceReport, ORACLE_LABEL};

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running a stage.
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(osdx_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

impl From<osdx_core::Error> for CliError {
    fn from(e: osdx_core::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Pipeline(e)
        }
    }
}
