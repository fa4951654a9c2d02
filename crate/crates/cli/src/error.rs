use bootplace_core::data::DataError;
use bootplace_core::eval::EvalError;
use bootplace_core::model::ModelError;
use bootplace_core::train::TrainError;
use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("incompatible input: {0}")]
    Compatibility(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Compatibility(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let msg = e.to_string();
        match e {
            DataError::InvalidConfig(_)
            | DataError::InvalidArgument(_)
            | DataError::Unsatisfiable { .. } => CliError::Config(msg),
            DataError::UnsupportedVersion { .. }
            | DataError::Annotation { .. }
            | DataError::Invalid { .. } => CliError::Compatibility(msg),
            DataError::MissingFile(_) | DataError::Image { .. } | DataError::Io { .. } => {
                CliError::Io(msg)
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Config(_) => CliError::Config(msg),
            ModelError::Io { .. } => CliError::Io(msg),
            ModelError::Tensor(_)
            | ModelError::Input(_)
            | ModelError::TooManySceneObjects { .. }
            | ModelError::Incompatible { .. } => CliError::Compatibility(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::NonFinite { .. } | TrainError::NonFiniteOutput => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Match(_) | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::InvalidK { .. } | EvalError::Invalid(_) => CliError::Config(e.to_string()),
            EvalError::MissingHoles { .. } => CliError::Compatibility(e.to_string()),
            EvalError::Image { .. } | EvalError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}
