//! Experiment orchestration behind the `mfips` binary.

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::optim::TrainError;
use crate::propensity::PropensityError;
use crate::sim::SimError;

pub mod commands;
pub mod config;
pub mod run;

pub use commands::{
    cmd_simulate, cmd_summarize, cmd_sweep_gamma, cmd_train, cmd_tune, BootstrapSettings,
    Overrides, ResultRow, SummaryRow,
};
pub use config::{ExperimentConfig, ExperimentData};
pub use run::{
    fit_propensities, run_method, FittedPropensities, Hyperparams, Method, MethodRun, RunOptions,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error in {field}: {message}")]
    Config { field: String, message: String },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
