use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{words, WordBearing};
use crate::error::{Error, Result};
use crate::model::{bos_encode, windowed_nll, CausalLm};
use crate::tokenizer::BpeTokenizer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
    #[serde(default)]
    pub subtask: String,
}

impl WordBearing for MinimalPair {
    fn item_words(&self) -> Vec<String> {
        let mut w = words(&self.good);
        w.extend(words(&self.bad));
        w
    }

    fn group(&self) -> String {
        self.subtask.clone()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubtaskAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub correct: usize,
    pub total: usize,
    /// `None` for an empty pair list.
    pub accuracy: Option<f64>,
    pub per_subtask: BTreeMap<String, SubtaskAccuracy>,
}

/// Total (or per-token mean) log-probability of an encoded sentence whose
/// first token is BOS.
pub fn sequence_log_prob<M: CausalLm>(model: &M, ids: &[u32], per_token: bool) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("sentence encodes to no tokens".into()));
    }
    let nll = windowed_nll(model, ids, model.context_length().div_ceil(2).max(1))?;
    let total = -nll.iter().sum::<f64>();
    Ok(if per_token { total / nll.len() as f64 } else { total })
}

/// A pair counts as correct iff the good sentence scores strictly higher.
/// `encode` must return BOS-prefixed ids.
pub fn minimal_pair_accuracy<M: CausalLm>(
    model: &M,
    encode: &dyn Fn(&str) -> Vec<u32>,
    pairs: &[MinimalPair],
    per_token: bool,
) -> Result<PairReport> {
    let mut report = PairReport::default();
    for pair in pairs {
        let good = sequence_log_prob(model, &encode(&pair.good), per_token)?;
        let bad = sequence_log_prob(model, &encode(&pair.bad), per_token)?;
        let ok = good > bad;
        report.total += 1;
        report.correct += ok as usize;
        let sub = report.per_subtask.entry(pair.subtask.clone()).or_default();
        sub.total += 1;
        sub.correct += ok as usize;
    }
    for sub in report.per_subtask.values_mut() {
        sub.accuracy = Some(sub.correct as f64 / sub.total as f64);
    }
    if report.total > 0 {
        report.accuracy = Some(report.correct as f64 / report.total as f64);
    }
    Ok(report)
}

pub fn minimal_pair_accuracy_bpe<M: CausalLm>(
    model: &M,
    tokenizer: &BpeTokenizer,
    pairs: &[MinimalPair],
    per_token: bool,
) -> Result<PairReport> {
    minimal_pair_accuracy(model, &|s| bos_encode(tokenizer, s), pairs, per_token)
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::model::BigramLm;

    // Words a=2, b=3, c=4 as single characters; BOS=0, EOS=1.
    fn encode(s: &str) -> Vec<u32> {
        let mut ids = vec![0];
        ids.extend(s.bytes().map(|b| (b - b'a') as u32 + 2));
        ids
    }

    fn chain() -> BigramLm {
        let p = ndarray::arr2(&[
            [0.0, 0.0, 0.6, 0.3, 0.1],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.1, 0.1, 0.7, 0.1],
            [0.0, 0.2, 0.5, 0.1, 0.2],
            [0.0, 0.5, 0.2, 0.2, 0.1],
        ]);
        BigramLm::new(&p, 16).unwrap()
    }

    fn chain_prob(p: &Array2<f64>, s: &str) -> f64 {
        let ids = encode(s);
        ids.windows(2).map(|w| p[[w[0] as usize, w[1] as usize]]).product()
    }

    #[test]
    fn matches_explicit_chain_products() {
        let m = chain();
        let table = ndarray::arr2(&[
            [0.0, 0.0, 0.6, 0.3, 0.1],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.1, 0.1, 0.7, 0.1],
            [0.0, 0.2, 0.5, 0.1, 0.2],
            [0.0, 0.5, 0.2, 0.2, 0.1],
        ]);
        let raw = [
            ("ab", "ba"),
            ("abab", "aabb"),
            ("c", "a"),
            ("bc", "cb"),
            ("aaa", "aba"),
            ("ca", "ac"),
            ("bb", "ab"),
            ("abc", "acb"),
            ("cc", "ca"),
            ("ba", "bb"),
        ];
        let pairs: Vec<MinimalPair> = raw
            .iter()
            .map(|(g, b)| MinimalPair {
                good: g.to_string(),
                bad: b.to_string(),
                subtask: if g.len() > 2 { "long" } else { "short" }.into(),
            })
            .collect();
        let expected = raw
            .iter()
            .filter(|(g, b)| chain_prob(&table, g) > chain_prob(&table, b))
            .count();
        let report = minimal_pair_accuracy(&m, &encode, &pairs, false).unwrap();
        assert_eq!(report.correct, expected);
        assert_eq!(report.total, 10);
        let sub_total: usize = report.per_subtask.values().map(|s| s.correct).sum();
        assert_eq!(sub_total, expected);
    }

    #[test]
    fn ties_are_incorrect() {
        let m = chain();
        let pairs = vec![MinimalPair {
            good: "abc".into(),
            bad: "abc".into(),
            subtask: String::new(),
        }];
        assert_eq!(
            minimal_pair_accuracy(&m, &encode, &pairs, false).unwrap().accuracy,
            Some(0.0)
        );
    }

    #[test]
    fn empty_pair_list_has_no_accuracy() {
        let m = chain();
        assert_eq!(minimal_pair_accuracy(&m, &encode, &[], false).unwrap().accuracy, None);
    }
}
