#![allow(dead_code)]

use std::path::Path;

use chronolm::model::ModelConfig;
use chronolm::pipeline::{write_fixture, PipelineConfig};
use chronolm::synthetic::{generate, SyntheticConfig};
use chronolm::training::TrainConfig;

pub fn tiny_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        seed: 3,
        words_per_slice: 6_000,
        sentences_per_document: 10,
        past_senses: 3,
        future_senses: 3,
        planted_occurrences: 6,
        emerging_occurrences: 12,
        examples_per_sense: 2,
        minimal_pairs: 12,
        ..SyntheticConfig::default()
    }
}

/// A fixture small enough to run every stage in seconds.
pub fn tiny_fixture(dir: &Path) -> PipelineConfig {
    let corpus = generate(&tiny_synthetic()).unwrap();
    let mut cfg = write_fixture(&corpus, dir).unwrap();
    cfg.tokenizer.vocab_size = 300;
    cfg.model = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: 1,
        d_model: 16,
        d_ff: 32,
        vocab_size: 300,
        context_length: 32,
        ..ModelConfig::default()
    };
    cfg.training = TrainConfig {
        learning_rate: 3e-3,
        epochs: 1,
        batch_size: 8,
        weight_decay: 0.1,
        max_steps: Some(20),
        ..TrainConfig::default()
    };
    cfg.evaluation.k = 10;
    cfg.evaluation.beam_width = 40;
    cfg.evaluation.max_word_tokens = 6;
    cfg.discovery.options.min_occurrences = 2;
    cfg.discovery.max_sentences = 300;
    cfg.save(&dir.join("config.toml")).unwrap();
    cfg
}
