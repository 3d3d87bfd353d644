use foci_core::backbones::{BackboneError, CheckpointError};
use foci_core::bags::BagError;
use foci_core::experiment::ExperimentError;
use foci_core::selector::SelectorError;
use foci_core::srp::SrpError;
use foci_core::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BagError> for CliError {
    fn from(e: BagError) -> Self {
        match e {
            BagError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::NonFiniteLoss { .. } | BackboneError::Engine(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SelectorError> for CliError {
    fn from(e: SelectorError) -> Self {
        match e {
            SelectorError::InvalidConfig(m) => CliError::Config(m),
            SelectorError::Backbone(b) => b.into(),
            SelectorError::Engine(_) | SelectorError::NoiseEndpoint(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Config(m),
            TrainError::NotFrozen => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::Engine(_) => CliError::Numerical(e.to_string()),
            TrainError::Backbone(b) => b.into(),
            TrainError::Selector(s) => s.into(),
        }
    }
}

impl From<SrpError> for CliError {
    fn from(e: SrpError) -> Self {
        match e {
            SrpError::InvalidSchedule(m) => CliError::Config(m),
            SrpError::Backbone(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Bags(x) => x.into(),
            ExperimentError::Backbone(x) => x.into(),
            ExperimentError::Selector(x) => x.into(),
            ExperimentError::Train(x) => x.into(),
            ExperimentError::Srp(x) => x.into(),
            ExperimentError::MissingInput(..) => CliError::Config(e.to_string()),
        }
    }
}
