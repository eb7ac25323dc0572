//! Diachronic language-model laboratory: time-sliced corpora, per-slice
//! tokenizers and transformers, distillation, constrained decoding and
//! the evaluations built on top of them.

pub mod attribution;
pub mod corpus;
pub mod decoding;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type Params32 = model::Params<f32>;
pub type Params64 = model::Params<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
