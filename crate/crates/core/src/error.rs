use std::path::PathBuf;

use crate::audio::FrontendError;
use crate::fed::FedError;
use crate::model::ModelError;
use crate::objective::ObjectiveError;
use crate::reliability::ReliabilityError;
use crate::secure::SecureError;

/// Crate-wide error; [`Error::is_config`] separates bad input from runtime
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Secure(#[from] SecureError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error("{0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Toml(_)
                | Error::Fed(FedError::Config(_))
                | Error::Model(ModelError::Config(_))
        ) || matches!(self, Error::Frontend(FrontendError::Config(_)))
            || matches!(self, Error::Objective(ObjectiveError::Weights(_)))
    }
}
