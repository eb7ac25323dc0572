use ndarray::{Array1, Array2, ArrayView1};

use super::{KvCache, Transformer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A causal language model seen through its next-token log-probabilities.
///
/// Scoring and decoding are written against this trait so analytic
/// reference models can stand in for the transformer in tests.
pub trait CausalLm {
    /// Opaque state after consuming a prefix.
    type State;

    fn vocab_size(&self) -> usize;

    fn context_length(&self) -> usize;

    /// Row `t` is the log-distribution of the token following `tokens[..=t]`.
    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>>;

    fn prefix_state(&self, prefix: &[u32]) -> Result<Self::State>;

    /// Log-distribution of the token following `prefix ++ suffix`.
    fn continue_log_probs(&self, state: &Self::State, suffix: &[u32]) -> Result<Array1<f64>>;
}

/// Numerically stable log-softmax, computed in `f64`.
pub fn log_softmax<T: Scalar>(row: ArrayView1<T>) -> Array1<f64> {
    let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v.to_f64_lossy() - lse)
}

fn log_softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&log_softmax(src));
    }
    out
}

pub struct TransformerState<T> {
    cache: Option<KvCache<T>>,
    last: Array1<f64>,
}

impl<T: Scalar> CausalLm for Transformer<T> {
    type State = TransformerState<T>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_length(&self) -> usize {
        self.config().context_length
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        Ok(log_softmax_rows(&self.logits(tokens)?))
    }

    fn prefix_state(&self, prefix: &[u32]) -> Result<Self::State> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        let (logits, cache) = self.prefill(prefix, None)?;
        let last = log_softmax(logits.row(logits.nrows() - 1));
        Ok(TransformerState {
            cache: Some(cache),
            last,
        })
    }

    fn continue_log_probs(&self, state: &Self::State, suffix: &[u32]) -> Result<Array1<f64>> {
        if suffix.is_empty() {
            return Ok(state.last.clone());
        }
        let (logits, _) = self.prefill(suffix, state.cache.as_ref())?;
        Ok(log_softmax(logits.row(logits.nrows() - 1)))
    }
}

/// Assigns equal probability to every token.
#[derive(Clone, Debug)]
pub struct UniformLm {
    pub vocab_size: usize,
    pub context_length: usize,
}

impl CausalLm for UniformLm {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        check_len(tokens.len(), self.context_length)?;
        Ok(Array2::from_elem(
            (tokens.len(), self.vocab_size),
            -(self.vocab_size as f64).ln(),
        ))
    }

    fn prefix_state(&self, _prefix: &[u32]) -> Result<()> {
        Ok(())
    }

    fn continue_log_probs(&self, _state: &(), _suffix: &[u32]) -> Result<Array1<f64>> {
        Ok(Array1::from_elem(self.vocab_size, -(self.vocab_size as f64).ln()))
    }
}

/// First-order Markov model given by an explicit transition table.
#[derive(Clone, Debug)]
pub struct BigramLm {
    log_table: Array2<f64>,
    context_length: usize,
}

impl BigramLm {
    /// `probs[[a, b]]` is `P(b | a)`; each row must sum to one.
    pub fn new(probs: &Array2<f64>, context_length: usize) -> Result<Self> {
        if probs.nrows() != probs.ncols() {
            return Err(Error::InvalidArgument("bigram table must be square".into()));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(BigramLm {
            log_table: probs.mapv(f64::ln),
            context_length,
        })
    }

    pub fn log_prob(&self, prev: u32, next: u32) -> f64 {
        self.log_table[[prev as usize, next as usize]]
    }
}

impl CausalLm for BigramLm {
    type State = u32;

    fn vocab_size(&self) -> usize {
        self.log_table.nrows()
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        check_len(tokens.len(), self.context_length)?;
        let mut out = Array2::zeros((tokens.len(), self.vocab_size()));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.log_table.row(t as usize));
        }
        Ok(out)
    }

    fn prefix_state(&self, prefix: &[u32]) -> Result<u32> {
        prefix
            .last()
            .copied()
            .ok_or_else(|| Error::InvalidArgument("empty prefix".into()))
    }

    fn continue_log_probs(&self, state: &u32, suffix: &[u32]) -> Result<Array1<f64>> {
        let last = suffix.last().copied().unwrap_or(*state);
        Ok(self.log_table.row(last as usize).to_owned())
    }
}

fn check_len(len: usize, context_length: usize) -> Result<()> {
    if len > context_length {
        Err(Error::SequenceTooLong { len, context_length })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn transformer_distributions_are_normalized() {
        let cfg = ModelConfig {
            vocab_size: 40,
            context_length: 16,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 32,
            ..Default::default()
        };
        let m = Transformer::<f32>::new(cfg).unwrap();
        let lp = m.log_probs(&[1, 2, 3, 4, 5]).unwrap();
        for row in lp.rows() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let state = m.prefix_state(&[1, 2, 3]).unwrap();
        let cont = m.continue_log_probs(&state, &[4, 5]).unwrap();
        for (a, b) in cont.iter().zip(lp.row(4)) {
            assert!((a - b).abs() < 1e-5);
        }
        let same = m.continue_log_probs(&state, &[]).unwrap();
        for (a, b) in same.iter().zip(lp.row(2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn stable_log_softmax() {
        let row = ndarray::arr1(&[1000.0f64, 1000.0, -1000.0]);
        let lp = log_softmax(row.view());
        assert!((lp[0] - (0.5f64).ln()).abs() < 1e-12);
        assert!(lp[2].is_finite());
    }

    #[test]
    fn bigram_rejects_bad_rows() {
        let t = ndarray::arr2(&[[0.5, 0.4], [0.5, 0.5]]);
        assert!(BigramLm::new(&t, 8).is_err());
    }
}
