use bmnet_core::checkpoint::CheckpointError;
use bmnet_core::cost::CostError;
use bmnet_core::data::DataError;
use bmnet_core::netspec::SpecError;
use bmnet_core::network::NetworkError;
use bmnet_core::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::Numeric(e.to_string()),
            TrainError::Data(_)
            | TrainError::EmptyDataset(_)
            | TrainError::Classes { .. }
            | TrainError::Metrics(_) => Self::Data(e.to_string()),
            TrainError::Plan(_) | TrainError::Network(_) | TrainError::Threads(_) => {
                Self::Config(e.to_string())
            }
        }
    }
}
