use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Rotary,
}

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default)]
    pub positional: Positional,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 64,
            d_ff: 176,
            vocab_size: 1024,
            context_length: 512,
            positional: Positional::Rotary,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 345M-parameter reference architecture (32 layers, 15 query
    /// heads over 5 key/value heads, 960 wide, 2560 hidden, 16k vocab).
    pub fn reference_345m() -> Self {
        ModelConfig {
            n_layers: 32,
            n_heads: 15,
            n_kv_heads: 5,
            d_model: 960,
            d_ff: 2560,
            vocab_size: 16_000,
            context_length: 512,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.n_kv_heads
    }

    /// Every violated shape constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            out.push("n_heads and n_kv_heads must be positive".to_string());
        } else {
            if self.d_model % self.n_heads != 0 {
                out.push(format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ));
            } else if self.head_dim() % 2 != 0 {
                out.push(format!(
                    "head dimension {} must be even for rotary positions",
                    self.head_dim()
                ));
            }
            if self.n_heads % self.n_kv_heads != 0 {
                out.push(format!(
                    "n_heads {} is not divisible by n_kv_heads {}",
                    self.n_heads, self.n_kv_heads
                ));
            }
        }
        if self.d_model == 0 || self.d_ff == 0 {
            out.push("d_model and d_ff must be positive".to_string());
        }
        if self.vocab_size < 2 {
            out.push("vocab_size must be at least 2".to_string());
        }
        if self.context_length < 2 {
            out.push(format!("context_length {} must be at least 2", self.context_length));
        }
        if !(self.norm_eps > 0.0) {
            out.push("norm_eps must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Closed-form parameter count with untied input and output embeddings.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 2 * d * d + 2 * d * self.kv_dim() + 3 * d * self.d_ff;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_architecture_is_345m() {
        let n = ModelConfig::reference_345m().parameter_count() as f64;
        assert!((n / 345e6 - 1.0).abs() < 0.02, "{n}");
    }

    #[test]
    fn toy_count_by_hand() {
        // 2 layers, 2 heads, width 32, hidden 64, 50 tokens:
        // embeddings 50*32 twice = 3200; per layer norms 64, q/o 2048,
        // k/v 2048, mlp 6144 => 10304; final norm 32.
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 50,
            context_length: 16,
            ..Default::default()
        };
        assert_eq!(cfg.parameter_count(), 3200 + 2 * 10304 + 32);
    }

    #[test]
    fn reports_all_problems() {
        let cfg = ModelConfig {
            n_heads: 3,
            n_kv_heads: 2,
            d_model: 64,
            context_length: 1,
            ..Default::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
