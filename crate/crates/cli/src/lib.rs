//! File formats, reports, and pipeline plumbing for the `fairvae` CLI.
//!
//! The algorithmic core lives in `fairvae-core`; this crate adds everything
//! that touches the filesystem: CSV datasets with a JSON schema sidecar,
//! bit-exact parameter checkpoints, JSON metrics reports, CSV training
//! curves, and the command implementations themselves.

pub mod checkpoint;
pub mod config;
pub mod csv_io;
pub mod pipeline;
pub mod report;
pub mod schema;

use std::process::ExitCode;

/// Exit-code contract: 0 ok, 2 config, 3 data, 4 numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) | CliError::Io(_) => ExitCode::from(3),
            CliError::Numeric(_) => ExitCode::from(4),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError::Numeric(msg.into())
    }
}

impl From<fairvae_core::data::DataError> for CliError {
    fn from(err: fairvae_core::data::DataError) -> Self {
        use fairvae_core::data::DataError;
        match err {
            DataError::InvalidSpec { .. } | DataError::BadFractions { .. } => {
                CliError::Config(err.to_string())
            }
            _ => CliError::Data(err.to_string()),
        }
    }
}

impl From<fairvae_core::train::TrainError> for CliError {
    fn from(err: fairvae_core::train::TrainError) -> Self {
        use fairvae_core::train::TrainError;
        match err {
            TrainError::InvalidConfig { .. } => CliError::Config(err.to_string()),
            TrainError::EmptyDataset | TrainError::NoObservedLabels | TrainError::EmptyEvaluation => {
                CliError::Data(err.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<fairvae_core::ssvae::ModelError> for CliError {
    fn from(err: fairvae_core::ssvae::ModelError) -> Self {
        CliError::Numeric(err.to_string())
    }
}

impl From<fairvae_core::risk::RiskError> for CliError {
    fn from(err: fairvae_core::risk::RiskError) -> Self {
        use fairvae_core::risk::RiskError;
        match err {
            RiskError::InvalidArgument { .. } => CliError::Config(err.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
