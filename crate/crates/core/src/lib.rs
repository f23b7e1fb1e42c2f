//! Two-stage contrastive training of cross-lingual sentence embeddings.
//!
//! Stage one aligns a sentence encoder on translation pairs; stage two
//! fine-tunes it on target-language entailment pairs. Everything runs on a
//! small in-crate reverse-mode autodiff engine in `f64`.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod evalkit;
pub mod error;
pub mod optim;
pub mod regimen;
pub mod seed;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
