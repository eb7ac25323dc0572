//! Bottom-up search for words whose surprisal drifts across the battery.
//!
//! Every sentence of a sample is scored word by word under each model.
//! A word's delta for model `i` is its value under model `i` minus its
//! value under the baseline model, aggregated over the word's occurrences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Member;
use crate::model::{normalize_row, word_surprisals, CausalLm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// Min-max normalized within each (model, sentence) row.
    #[default]
    Normalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryOptions {
    pub min_occurrences: usize,
    pub top_n: usize,
    /// Slack for the strict-decrease test: `d[i+1] < d[i] + epsilon`.
    pub epsilon: f64,
    pub aggregation: Aggregation,
    pub values: ValueKind,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        DiscoveryOptions {
            min_occurrences: 5,
            top_n: 20,
            epsilon: 0.0,
            aggregation: Aggregation::Mean,
            values: ValueKind::Normalized,
        }
    }
}

/// One scored word occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub word: String,
    pub sentence_id: usize,
    /// Byte span within the sentence.
    pub start: usize,
    pub end: usize,
    /// One value per battery member, in battery order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub word: String,
    pub occurrences: usize,
    /// Per-model delta against the baseline, in battery order.
    pub deltas: Vec<f64>,
    pub monotone_decreasing: bool,
    pub first_last_change: f64,
    pub cumulative_delta: f64,
}

/// Scores every word occurrence of `sample` under every member.
pub fn score_occurrences<M: CausalLm, S: AsRef<str>>(
    battery: &[Member<'_, M>],
    sample: &[S],
    kind: ValueKind,
) -> Result<Vec<Occurrence>> {
    let mut out = Vec::new();
    for (sid, sentence) in sample.iter().enumerate() {
        let sentence = sentence.as_ref();
        let mut per_model = Vec::with_capacity(battery.len());
        for m in battery {
            let ws = word_surprisals(m.model, m.tokenizer, sentence)?;
            let raw: Vec<f64> = ws.iter().map(|w| w.value).collect();
            let vals = match kind {
                ValueKind::Raw => raw,
                ValueKind::Normalized => normalize_row(&raw),
            };
            per_model.push((ws, vals));
        }
        let Some((first, _)) = per_model.first() else {
            continue;
        };
        for (w, word) in first.iter().enumerate() {
            let values: Vec<f64> = per_model.iter().map(|(_, v)| v[w]).collect();
            if values.iter().any(|v| !v.is_finite()) {
                continue;
            }
            out.push(Occurrence {
                word: word.word.clone(),
                sentence_id: sid,
                start: word.start,
                end: word.end,
                values,
            });
        }
    }
    Ok(out)
}

fn aggregate(mut xs: Vec<f64>, how: Aggregation) -> f64 {
    xs.sort_by(f64::total_cmp);
    match how {
        Aggregation::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
        Aggregation::Median => {
            let n = xs.len();
            if n % 2 == 1 {
                xs[n / 2]
            } else {
                0.5 * (xs[n / 2 - 1] + xs[n / 2])
            }
        }
    }
}

fn baseline_index<M>(battery: &[Member<'_, M>], baseline: &str) -> Result<usize> {
    battery
        .iter()
        .position(|m| m.label == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline slice {baseline} is not in the battery")))
}

/// Aggregated trajectory of every word with enough occurrences, in word
/// order.
pub fn trajectories(occurrences: &[Occurrence], baseline: usize, options: &DiscoveryOptions) -> Vec<TrajectoryRecord> {
    let mut by_word: BTreeMap<&str, Vec<&Occurrence>> = BTreeMap::new();
    for o in occurrences {
        by_word.entry(&o.word).or_default().push(o);
    }
    let mut out = Vec::new();
    for (word, occ) in by_word {
        if occ.len() < options.min_occurrences.max(1) {
            continue;
        }
        let n_models = occ[0].values.len();
        let deltas: Vec<f64> = (0..n_models)
            .map(|i| {
                let diffs = occ.iter().map(|o| o.values[i] - o.values[baseline]).collect();
                aggregate(diffs, options.aggregation)
            })
            .collect();
        let monotone = deltas.len() >= 2 && deltas.windows(2).all(|w| w[1] < w[0] + options.epsilon);
        out.push(TrajectoryRecord {
            word: word.to_string(),
            occurrences: occ.len(),
            first_last_change: deltas[0] - deltas[deltas.len() - 1],
            cumulative_delta: deltas.iter().map(|d| d.max(0.0)).sum(),
            monotone_decreasing: monotone,
            deltas,
        });
    }
    out
}

/// Words whose deltas strictly decrease across the battery, ranked by the
/// change between first and last model.
pub fn trajectory_candidates<M: CausalLm, S: AsRef<str>>(
    battery: &[Member<'_, M>],
    baseline: &str,
    sample: &[S],
    options: &DiscoveryOptions,
) -> Result<Vec<TrajectoryRecord>> {
    let b = baseline_index(battery, baseline)?;
    let occ = score_occurrences(battery, sample, options.values)?;
    Ok(rank_candidates(trajectories(&occ, b, options), options.top_n))
}

pub fn rank_candidates(records: Vec<TrajectoryRecord>, top_n: usize) -> Vec<TrajectoryRecord> {
    let mut keep: Vec<TrajectoryRecord> = records.into_iter().filter(|r| r.monotone_decreasing).collect();
    keep.sort_by(|a, b| {
        b.first_last_change
            .total_cmp(&a.first_last_change)
            .then_with(|| a.word.cmp(&b.word))
    });
    keep.truncate(top_n);
    keep
}

/// Words ranked by the sum of their positive deltas; ties go to the more
/// frequent word.
pub fn cumulative_divergence<M: CausalLm, S: AsRef<str>>(
    battery: &[Member<'_, M>],
    baseline: &str,
    sample: &[S],
    options: &DiscoveryOptions,
) -> Result<Vec<TrajectoryRecord>> {
    let b = baseline_index(battery, baseline)?;
    let occ = score_occurrences(battery, sample, options.values)?;
    Ok(rank_cumulative(trajectories(&occ, b, options), options.top_n))
}

pub fn rank_cumulative(mut records: Vec<TrajectoryRecord>, top_n: usize) -> Vec<TrajectoryRecord> {
    records.sort_by(|a, b| {
        b.cumulative_delta
            .total_cmp(&a.cumulative_delta)
            .then_with(|| b.occurrences.cmp(&a.occurrences))
            .then_with(|| a.word.cmp(&b.word))
    });
    records.truncate(top_n);
    records
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceRow {
    pub sentence_id: usize,
    pub start: usize,
    pub values: Vec<f64>,
    pub context: String,
    /// Left empty for manual annotation.
    pub sense_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceTable {
    pub word: String,
    pub models: Vec<String>,
    pub rows: Vec<OccurrenceRow>,
    pub note: Option<String>,
}

impl OccurrenceTable {
    /// Tab-separated table with one column per model.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sentence_id\tstart");
        for m in &self.models {
            s.push('\t');
            s.push_str(m);
        }
        s.push_str("\tsense_label\tcontext\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}", r.sentence_id, r.start));
            for v in &r.values {
                s.push_str(&format!("\t{v:?}"));
            }
            s.push_str(&format!(
                "\t{}\t{}\n",
                r.sense_label,
                r.context.replace(['\t', '\n'], " ")
            ));
        }
        s
    }
}

fn snippet(sentence: &str, start: usize, end: usize, radius: usize) -> String {
    let mut lo = start.saturating_sub(radius);
    while !sentence.is_char_boundary(lo) {
        lo -= 1;
    }
    let mut hi = (end + radius).min(sentence.len());
    while !sentence.is_char_boundary(hi) {
        hi += 1;
    }
    format!(
        "{}[{}]{}",
        &sentence[lo..start],
        &sentence[start..end],
        &sentence[end..hi]
    )
}

/// Every occurrence of `word` with its per-model values and a context
/// snippet.
pub fn occurrence_trajectories<M: CausalLm, S: AsRef<str>>(
    battery: &[Member<'_, M>],
    word: &str,
    sample: &[S],
    kind: ValueKind,
) -> Result<OccurrenceTable> {
    let target = word.to_lowercase();
    let relevant: Vec<(usize, &str)> = sample
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.as_ref()))
        .filter(|(_, s)| crate::corpus::words(s).contains(&target))
        .collect();
    let texts: Vec<&str> = relevant.iter().map(|(_, s)| *s).collect();
    let occ = score_occurrences(battery, &texts, kind)?;
    let rows: Vec<OccurrenceRow> = occ
        .into_iter()
        .filter(|o| o.word == target)
        .map(|o| {
            let (sid, sentence) = relevant[o.sentence_id];
            OccurrenceRow {
                sentence_id: sid,
                start: o.start,
                context: snippet(sentence, o.start, o.end, 40),
                values: o.values,
                sense_label: String::new(),
            }
        })
        .collect();
    let note = rows
        .is_empty()
        .then(|| format!("{target} does not occur in the sample"));
    Ok(OccurrenceTable {
        word: target,
        models: battery.iter().map(|m| m.label.clone()).collect(),
        rows,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(word: &str, sid: usize, values: &[f64]) -> Occurrence {
        Occurrence {
            word: word.into(),
            sentence_id: sid,
            start: 0,
            end: word.len(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn deltas_and_monotonicity() {
        let o = vec![
            occ("rail", 0, &[0.9, 0.5, 0.1]),
            occ("rail", 1, &[0.7, 0.5, 0.3]),
            occ("the", 0, &[0.2, 0.2, 0.2]),
            occ("the", 1, &[0.2, 0.2, 0.2]),
            occ("odd", 1, &[0.1, 0.9, 0.5]),
            occ("odd", 2, &[0.1, 0.9, 0.5]),
        ];
        let opts = DiscoveryOptions {
            min_occurrences: 2,
            ..Default::default()
        };
        let t = trajectories(&o, 2, &opts);
        let rail = t.iter().find(|r| r.word == "rail").unwrap();
        assert!((rail.deltas[0] - 0.6).abs() < 1e-12);
        assert!((rail.deltas[1] - 0.3).abs() < 1e-12);
        assert_eq!(rail.deltas[2], 0.0);
        assert!(rail.monotone_decreasing);
        let the = t.iter().find(|r| r.word == "the").unwrap();
        assert!(!the.monotone_decreasing);
        assert_eq!(the.cumulative_delta, 0.0);
        let ranked = rank_candidates(t.clone(), 10);
        assert_eq!(ranked.iter().map(|r| r.word.as_str()).collect::<Vec<_>>(), vec!["rail"]);
        let cum = rank_cumulative(t, 10);
        assert_eq!(cum[0].word, "rail");
        assert!(cum[0].cumulative_delta > cum[1].cumulative_delta);
    }

    #[test]
    fn epsilon_admits_near_ties() {
        let o = vec![occ("w", 0, &[0.5, 0.5, 0.0])];
        let strict = trajectories(
            &o,
            2,
            &DiscoveryOptions {
                min_occurrences: 1,
                ..Default::default()
            },
        );
        assert!(!strict[0].monotone_decreasing);
        let loose = trajectories(
            &o,
            2,
            &DiscoveryOptions {
                min_occurrences: 1,
                epsilon: 1e-6,
                ..Default::default()
            },
        );
        assert!(loose[0].monotone_decreasing);
    }

    #[test]
    fn median_aggregation() {
        let o = vec![
            occ("w", 0, &[1.0, 0.0]),
            occ("w", 1, &[0.2, 0.0]),
            occ("w", 2, &[0.3, 0.0]),
        ];
        let t = trajectories(
            &o,
            1,
            &DiscoveryOptions {
                min_occurrences: 1,
                aggregation: Aggregation::Median,
                ..Default::default()
            },
        );
        assert!((t[0].deltas[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn snippet_marks_word() {
        assert_eq!(snippet("a big station here", 6, 13, 3), "ig [station] he");
    }
}
