//! Origin identification for image-to-image translations in VAE embedding
//! space: a translation simulator, a learned linear projection, an exact
//! cosine matcher, retrieval metrics and spectral diagnostics of the
//! projection.

pub mod config;
pub mod embedding;
pub mod eval;
pub mod format;
pub mod loss;
pub mod matcher;
pub mod rng;
pub mod sim;
pub mod spectral;
pub mod train;

pub use embedding::{EmbeddingSet, ProjectionMatrix};
pub use format::GroundTruth;

use thiserror::Error;

/// Any pipeline failure, tagged with a stable machine-readable kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Loss(#[from] loss::LossError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Match(#[from] matcher::MatchError),
    #[error(transparent)]
    Spectral(#[from] spectral::SpectralError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Embedding(_) => "embedding",
            Error::Format(format::FormatError::Io { .. }) => "io",
            Error::Format(_) => "format",
            Error::Sim(_) => "sim",
            Error::Loss(_) => "loss",
            Error::Train(_) => "train",
            Error::Match(_) => "match",
            Error::Spectral(_) => "spectral",
            Error::Eval(eval::EvalError::MissingGroundTruth(_)) => "missing-ground-truth",
            Error::Eval(_) => "eval",
            Error::Config(config::ConfigError::Io { .. }) => "io",
            Error::Config(_) => "config",
        }
    }
}
