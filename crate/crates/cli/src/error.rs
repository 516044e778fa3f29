use castmtl_core::dataio::DataError;
use castmtl_core::evaluation::EvalError;
use castmtl_core::experiments::ExperimentError;
use castmtl_core::model::ModelError;
use castmtl_core::training::TrainError;

/// Failure of one command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    ArmFailed(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::ArmFailed(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) | TrainError::BatchSize(_) | TrainError::EmptyLoss | TrainError::MissingTask(_) => {
                CliError::Usage(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::EmptyResults => CliError::Usage(e.to_string()),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Data(d) => d.into(),
            ExperimentError::Eval(v) => v.into(),
            ExperimentError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}
