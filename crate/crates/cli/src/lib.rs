//! Command line front end: scenario loading, the `check`, `run` and `sweep`
//! commands, and the CSV and plot-series writers behind them.

pub mod commands;
pub mod output;
pub mod scenario;

use thiserror::Error;

pub use scenario::ScenarioFile;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad scenario, bad flags, or resource assumptions that do not hold.
    #[error("{0}")]
    Config(String),
    /// The run itself failed: infeasible start, solver trouble, I/O.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
