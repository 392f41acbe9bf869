use std::path::PathBuf;

use thiserror::Error;

use crate::ndgrad::GradError;

/// Which member of an interpolated pair a loss term belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSide {
    I,
    J,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown utterance id {0:?}")]
    UnknownId(String),

    #[error("CTC label of length {label_len} needs at least {needed} frames, only {frames} available{}", side.map(|s| format!(" (pair side {s:?})")).unwrap_or_default())]
    Infeasible {
        label_len: usize,
        frames: usize,
        needed: usize,
        side: Option<PairSide>,
    },

    #[error("{0}")]
    Shape(String),

    #[error("empty target: {0}")]
    EmptyTarget(String),

    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocabulary { token: u32, vocab: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corrupt feature file {path}: {reason}")]
    Features { path: PathBuf, reason: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failure mid-computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownId(_) | Error::Json(_) | Error::OutOfVocabulary { .. }
        ) || matches!(self, Error::Checkpoint(m) if m.contains("version"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
