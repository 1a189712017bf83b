//! Experiment configuration and the commands behind the `fedfusion` binary.

pub mod commands;
pub mod config;

pub use commands::{
    ablate, evaluate, load_data, run_experiment, sweep_k, synth, train, ExperimentRun, SweepRow, ARTIFACTS,
};
pub use config::{DatasetSource, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Runtime(#[from] fedfusion_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }
}
