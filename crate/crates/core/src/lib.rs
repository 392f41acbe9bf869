//! Interpolation augmentation (IPA / AIPA) with constrained-objective-space
//! training for toy speech-to-text transduction.
//!
//! Everything runs on a small in-crate autodiff engine ([`ndgrad`]): synthetic
//! corpora ([`data`]), SpecAugment and batch interpolation ([`augment`]), CTC,
//! cross-entropy and distillation losses ([`losses`]), tiny Transformer
//! transducers ([`model`]), training and evaluation ([`trainer`]) and a
//! representation probe ([`probe`]).

pub mod augment;
pub mod data;
mod error;
pub mod losses;
pub mod model;
pub mod ndgrad;
pub mod probe;
pub mod trainer;

pub use error::{Error, PairSide, Result};
