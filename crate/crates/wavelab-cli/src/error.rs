use std::path::PathBuf;
use thiserror::Error;
use wavelab::broadwell::BroadwellError;
use wavelab::dynamics::DynamicsError;
use wavelab::initial_data::ApproxError;
use wavelab::metric::MetricError;
use wavelab::peakon::PeakonError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at {path}: {message}")]
    ConfigInvalid { path: String, message: String },
    #[error("subcommand `{command}` cannot run scenario `{scenario}`")]
    ScenarioMismatch { command: String, scenario: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("peakon state: {0}")]
    State(#[from] PeakonError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
    #[error("initial data: {0}")]
    Approx(#[from] ApproxError),
    #[error("broadwell: {0}")]
    Broadwell(#[from] BroadwellError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
