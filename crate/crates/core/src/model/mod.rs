//! Decoder-only causal language model, scoring utilities and checkpoints.

mod checkpoint;
mod config;
mod lm;
mod params;
pub mod scoring;
mod transformer;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointMeta, Loaded, TensorEntry, MAGIC};
pub use config::{ModelConfig, Positional};
pub use lm::{log_softmax, BigramLm, CausalLm, TransformerState, UniformLm};
pub use params::{LayerParams, ParamKind, Params};
pub use scoring::{
    bos_encode, nll, normalize_profile, normalize_row, perplexity, perplexity_ids, sentence_log_prob, windowed_nll,
    word_surprisals, SurprisalProfile, WordSurprisal,
};
pub use transformer::{ForwardCache, KvCache, Transformer};
