//! Minimal reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of every differentiable leaf. Every primitive checks its output
//! for NaN/Inf and fails immediately instead of propagating garbage.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error};
pub use graph::{Gradients, Graph, Var, LOG_ZERO};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("backward seed does not depend on any differentiable input")]
    DetachedSeed,
    #[error("index {index} out of range for a table of {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    BadStep(f64),
    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,
}
