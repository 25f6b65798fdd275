use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("dialogue load error: {0}")]
    Load(String),

    #[error("invalid synthetic task spec: {0}")]
    TaskSpec(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or violated preconditions, as
    /// opposed to failures that happen while a well-formed job is running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::NumericInput(_)
                | Error::Contract(_)
                | Error::Input(_)
                | Error::Ingestion(_)
                | Error::Load(_)
                | Error::TaskSpec(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
        ) || matches!(self, Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
