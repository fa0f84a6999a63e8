//! Command implementations behind the `ctxslt` binary.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use ctxslt::corpus::CorpusError;
use ctxslt::embedding::{EmbeddingError, FmatError};
use ctxslt::metrics::MetricsError;
use ctxslt::model::ModelError;
use ctxslt::spotting::SpottingError;
use ctxslt::training::TrainError;
use thiserror::Error;

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
    #[error("spotting error: {0}")]
    Spotting(#[from] SpottingError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("feature file error: {0}")]
    Fmat(#[from] FmatError),
    #[error("embedding error: {0}")]
    Embedding(#[from] EmbeddingError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short category printed ahead of the message.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Io { .. } => "io",
            CliError::Corpus(_) => "corpus",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Spotting(_) => "spotting",
            CliError::Metrics(_) => "metrics",
            CliError::Fmat(_) => "fmat",
            CliError::Embedding(_) => "embedding",
        }
    }
}
