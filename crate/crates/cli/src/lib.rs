//! Command-line harness for the vision-state fusion kit: configuration,
//! the pipeline subcommands, cost tables and SVG reports.

pub mod commands;
pub mod config;
pub mod costs;
pub mod report;

use thiserror::Error;
use vsfusion::augment::AugmentError;
use vsfusion::eval::EvalError;
use vsfusion::nnet::{ModelFileError, NnetError};
use vsfusion::scenegen::{DatasetError, SceneError};
use vsfusion::train::TrainError;

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::Arch(_) | NnetError::Variant(_) => CliError::Usage(e.to_string()),
            NnetError::Shape(_) | NnetError::EmptyCalibration => CliError::Data(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            SceneError::NoVisiblePlacement(_) => CliError::Data(e.to_string()),
            SceneError::NonFinitePose => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::EmptyData(_) | TrainError::Incompatible(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Protocol(_) => CliError::Usage(e.to_string()),
            EvalError::ZeroVariance | EvalError::ZeroNormQuaternion(_) | EvalError::AllZero => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}
