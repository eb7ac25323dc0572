//! Cloze construction and ranking, leakage metrics, minimal pairs and the
//! cross-time perplexity matrix.

mod cloze;
mod metrics;
mod pairs;

use serde::{Deserialize, Serialize};

pub use cloze::{build_cloze_set, in_tail, target_start, ClozeBuildReport, ClozeConfig, ClozeTask, SenseRecord};
pub use metrics::{
    grouped_accuracy, leakage_report, mrr, slice_grouper, ClozeRanking, GroupAccuracy, GroupedAccuracy, LeakageReport,
};
pub use pairs::{
    minimal_pair_accuracy, minimal_pair_accuracy_bpe, sequence_log_prob, MinimalPair, PairReport, SubtaskAccuracy,
};

use crate::decoding::{top_k_for_text, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::{perplexity, CausalLm};
use crate::tokenizer::BpeTokenizer;

/// One model of a battery with the tokenizer it was trained with.
pub struct Member<'a, M> {
    pub label: String,
    pub model: &'a M,
    pub tokenizer: &'a BpeTokenizer,
}

impl<'a, M> Member<'a, M> {
    pub fn new(label: impl Into<String>, model: &'a M, tokenizer: &'a BpeTokenizer) -> Self {
        Member {
            label: label.into(),
            model,
            tokenizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankFailure {
    pub task_id: String,
    pub model: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClozeOutcome {
    pub rankings: Vec<ClozeRanking>,
    /// Tasks that could not be decoded; they carry no ranking.
    pub failures: Vec<RankFailure>,
}

impl ClozeOutcome {
    pub fn for_model(&self, model: &str) -> Vec<ClozeRanking> {
        self.rankings.iter().filter(|r| r.model == model).cloned().collect()
    }
}

/// Ranks every task's target among each model's top-k one-word
/// completions (case-insensitive).
pub fn rank_cloze<M: CausalLm>(
    battery: &[Member<'_, M>],
    tasks: &[ClozeTask],
    options: &DecodeOptions,
) -> ClozeOutcome {
    let mut out = ClozeOutcome::default();
    for member in battery {
        for task in tasks {
            match top_k_for_text(member.model, member.tokenizer, &task.prefix, options) {
                Ok(c) => out.rankings.push(ClozeRanking::from_position(
                    &task.id,
                    &member.label,
                    c.rank_of(&task.target_word),
                    options.k,
                )),
                Err(e) => out.failures.push(RankFailure {
                    task_id: task.id.clone(),
                    model: member.label.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    out
}

/// Perplexity of each model (row) on each slice's test set (column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub model: String,
    pub test_slice: String,
    pub perplexity: f64,
}

impl PerplexityMatrix {
    pub fn get(&self, model: &str, test: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == model)?;
        let j = self.columns.iter().position(|c| c == test)?;
        Some(self.values[i][j])
    }

    /// Row `i` is strictly smallest at column `i`.
    pub fn row_minimum_on_diagonal(&self, i: usize) -> bool {
        let row = &self.values[i];
        row.iter().enumerate().all(|(j, &v)| j == i || v > row[i])
    }

    /// Entries of row `i` never decrease as slice distance grows.
    pub fn row_monotone_in_distance(&self, i: usize) -> bool {
        let row = &self.values[i];
        (0..row.len()).all(|a| (0..row.len()).all(|b| a.abs_diff(i) >= b.abs_diff(i) || row[a] <= row[b]))
    }

    pub fn entries(&self) -> Vec<MatrixEntry> {
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in self.columns.iter().enumerate() {
                out.push(MatrixEntry {
                    model: r.clone(),
                    test_slice: c.clone(),
                    perplexity: self.values[i][j],
                });
            }
        }
        out
    }

    /// Labeled CSV with a header row; values printed with full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,test_slice,perplexity\n");
        for e in self.entries() {
            s.push_str(&format!("{},{},{:?}\n", e.model, e.test_slice, e.perplexity));
        }
        s
    }
}

/// Every battery member scored on every test set. Labels of the battery
/// and the test sets must coincide, in the same order.
pub fn cross_time_matrix<M: CausalLm, S: AsRef<str>>(
    battery: &[Member<'_, M>],
    test_sets: &[(String, Vec<S>)],
    stride: usize,
) -> Result<PerplexityMatrix> {
    let rows: Vec<String> = battery.iter().map(|m| m.label.clone()).collect();
    let columns: Vec<String> = test_sets.iter().map(|(l, _)| l.clone()).collect();
    for r in &rows {
        if !columns.contains(r) {
            return Err(Error::InvalidArgument(format!("no test set for slice {r}")));
        }
    }
    for c in &columns {
        if !rows.contains(c) {
            return Err(Error::InvalidArgument(format!("no model for slice {c}")));
        }
    }
    let mut values = Vec::with_capacity(rows.len());
    for member in battery {
        let mut row = Vec::with_capacity(columns.len());
        for (label, texts) in test_sets {
            let ppl = perplexity(member.model, member.tokenizer, texts, stride)
                .map_err(|e| Error::Other(format!("{} on {label}: {e}", member.label)))?;
            row.push(ppl);
        }
        values.push(row);
    }
    Ok(PerplexityMatrix { rows, columns, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UniformLm;
    use crate::tokenizer::{train_bpe, Vocabulary};

    #[test]
    fn identical_models_give_constant_columns() {
        let tok = train_bpe(&["one two three four"], 270).unwrap();
        let m = UniformLm {
            vocab_size: tok.vocab_size(),
            context_length: 16,
        };
        let battery = vec![Member::new("a", &m, &tok), Member::new("b", &m, &tok)];
        let sets = vec![
            ("a".to_string(), vec!["one two"]),
            ("b".to_string(), vec!["three four three"]),
        ];
        let mx = cross_time_matrix(&battery, &sets, 8).unwrap();
        for j in 0..2 {
            assert_eq!(mx.values[0][j], mx.values[1][j]);
            assert!((mx.values[0][j] - tok.vocab_size() as f64).abs() < 1e-9);
        }
        assert!(!mx.row_minimum_on_diagonal(0));
        let missing = vec![("a".to_string(), vec!["one"])];
        assert!(cross_time_matrix(&battery, &missing, 8).is_err());
    }

    #[test]
    fn matrix_shape_checks() {
        let mx = PerplexityMatrix {
            rows: vec!["a".into(), "b".into(), "c".into()],
            columns: vec!["a".into(), "b".into(), "c".into()],
            values: vec![vec![2.0, 3.0, 4.0], vec![3.0, 2.0, 5.0], vec![5.0, 3.0, 2.5]],
        };
        assert!((0..3).all(|i| mx.row_minimum_on_diagonal(i)));
        assert!(mx.row_monotone_in_distance(0));
        assert!(mx.row_monotone_in_distance(1));
        assert!(mx.row_monotone_in_distance(2));
        let bad = PerplexityMatrix {
            values: vec![vec![2.0, 5.0, 4.0], vec![3.0, 2.0, 5.0], vec![5.0, 3.0, 2.5]],
            ..mx.clone()
        };
        assert!(!bad.row_monotone_in_distance(0));
        assert_eq!(mx.get("b", "c"), Some(5.0));
        assert!(mx.to_csv().starts_with("model,test_slice,perplexity\na,a,2.0\n"));
    }
}
