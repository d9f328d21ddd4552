use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate neighborhood_id '{0}'")]
    DuplicateId(String),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("column '{0}' has zero variance")]
    ZeroVariance(String),

    #[error("factor '{name}' has {distinct} distinct values, basis dimension {k} requires at least {k}")]
    InsufficientVariation { name: String, distinct: usize, k: usize },

    #[error("design is rank deficient at term '{0}'")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown term '{0}'")]
    UnknownTerm(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing upstream artifact '{file}' (produced by the {producer} stage)")]
    MissingArtifact { file: String, producer: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
