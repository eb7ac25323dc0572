use serde::{Deserialize, Serialize};

use crate::corpus::words::word_spans;
use crate::corpus::{filter_in_vocab, words, WordBearing, WordCounts};
use crate::error::Result;

/// One dated sense from a sense inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SenseRecord {
    pub word: String,
    #[serde(default)]
    pub sense_id: Option<String>,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub definition: Option<String>,
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub frequency_per_million: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClozeConfig {
    /// The target must start within this trailing fraction of characters.
    pub tail_fraction: f64,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub min_count: u64,
}

impl Default for ClozeConfig {
    fn default() -> Self {
        ClozeConfig {
            tail_fraction: 0.10,
            min_frequency: 1.0,
            max_frequency: 1000.0,
            min_count: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozeTask {
    pub id: String,
    /// Sentence text up to the first character of the target.
    pub prefix: String,
    pub target_word: String,
    pub sense_year: i32,
    pub frequency_per_million: f64,
    #[serde(default)]
    pub definition: Option<String>,
    pub sentence: String,
}

impl WordBearing for ClozeTask {
    fn item_words(&self) -> Vec<String> {
        words(&self.sentence)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClozeBuildReport {
    pub records: usize,
    pub sentences: usize,
    /// `(record index, reason)` for records that produced no candidates.
    pub skipped: Vec<(usize, String)>,
    pub missing_target: usize,
    pub outside_tail: usize,
    pub outside_frequency: usize,
    pub out_of_vocabulary: usize,
    pub retained: usize,
}

/// Character offset at which the target's last occurrence starts, if the
/// word occurs in the sentence.
pub fn target_start(sentence: &str, target: &str) -> Option<usize> {
    let t = target.to_lowercase();
    word_spans(sentence)
        .into_iter()
        .filter(|&(s, e)| sentence[s..e].to_lowercase() == t)
        .map(|(s, _)| s)
        .next_back()
}

/// True iff the target starting at byte `start` lies within the trailing
/// `tail_fraction` of the sentence's characters.
pub fn in_tail(sentence: &str, start: usize, tail_fraction: f64) -> bool {
    let total = sentence.chars().count();
    let before = sentence[..start].chars().count();
    before as f64 + 1e-9 >= (1.0 - tail_fraction) * total as f64
}

/// Cloze tasks from sense records: tail position, frequency band, then
/// vocabulary filter against every supplied vocabulary (skipped when none
/// are supplied).
pub fn build_cloze_set(
    records: &[SenseRecord],
    config: &ClozeConfig,
    vocabularies: &[WordCounts],
) -> Result<(Vec<ClozeTask>, ClozeBuildReport)> {
    let mut report = ClozeBuildReport {
        records: records.len(),
        ..Default::default()
    };
    let mut candidates = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let Some(year) = rec.year else {
            report.skipped.push((i, "missing sense year".into()));
            continue;
        };
        if rec.examples.is_empty() {
            report.skipped.push((i, "no example sentence".into()));
            continue;
        }
        let sense = rec.sense_id.clone().unwrap_or_else(|| i.to_string());
        for (j, sentence) in rec.examples.iter().enumerate() {
            report.sentences += 1;
            let Some(start) = target_start(sentence, &rec.word) else {
                report.missing_target += 1;
                continue;
            };
            if !in_tail(sentence, start, config.tail_fraction) {
                report.outside_tail += 1;
                continue;
            }
            let freq = match rec.frequency_per_million {
                Some(f) if f >= config.min_frequency && f <= config.max_frequency => f,
                _ => {
                    report.outside_frequency += 1;
                    continue;
                }
            };
            candidates.push(ClozeTask {
                id: format!("{}:{sense}:{j}", rec.word.to_lowercase()),
                prefix: sentence[..start].to_string(),
                target_word: rec.word.to_lowercase(),
                sense_year: year,
                frequency_per_million: freq,
                definition: rec.definition.clone(),
                sentence: sentence.clone(),
            });
        }
    }
    let tasks = if vocabularies.is_empty() {
        candidates
    } else {
        let before = candidates.len();
        let out = filter_in_vocab(&candidates, vocabularies, config.min_count)?.retained;
        report.out_of_vocabulary = before - out.len();
        out
    };
    report.retained = tasks.len();
    Ok((tasks, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(word: &str, year: Option<i32>, ex: &[&str], freq: f64) -> SenseRecord {
        SenseRecord {
            word: word.into(),
            sense_id: None,
            year,
            definition: None,
            examples: ex.iter().map(|s| s.to_string()).collect(),
            frequency_per_million: Some(freq),
        }
    }

    #[test]
    fn phone_example() {
        let s = "By the time help arrived at the farmhouse the line had been cut and the phone was dead";
        let (tasks, report) =
            build_cloze_set(&[rec("dead", Some(1882), &[s], 50.0)], &ClozeConfig::default(), &[]).unwrap();
        assert_eq!(report.retained, 1);
        assert!(tasks[0].prefix.ends_with("the phone was "));
        assert_eq!(tasks[0].target_word, "dead");
        assert_eq!(tasks[0].sense_year, 1882);
    }

    #[test]
    fn tail_rule_rejects_sentence_start() {
        let s = format!("Dead {}", "x".repeat(95));
        assert_eq!(s.chars().count(), 100);
        let (tasks, report) =
            build_cloze_set(&[rec("dead", Some(1882), &[&s], 50.0)], &ClozeConfig::default(), &[]).unwrap();
        assert!(tasks.is_empty());
        assert_eq!(report.outside_tail, 1);
    }

    #[test]
    fn boundary_of_tail_is_inclusive() {
        let s = format!("{}dog", "a ".repeat(45));
        assert_eq!(s.len(), 93);
        // start 90 of 93 chars: 90 >= 83.7
        assert!(in_tail(&s, 90, 0.1));
        let s = format!("{} dog", "a".repeat(26));
        // start 27 of 30 chars: 27 >= 27
        assert!(in_tail(&s, 27, 0.1));
        assert!(!in_tail(&s, 26, 0.1));
    }

    #[test]
    fn frequency_year_and_vocab_filters() {
        let records = vec![
            rec("cat", Some(1900), &["the dog saw the dog and the dog saw the cat"], 0.5),
            rec("cat", None, &["the dog saw the dog and the dog saw the cat"], 5.0),
            rec("cat", Some(1900), &[], 5.0),
            rec(
                "cat",
                Some(1900),
                &[
                    "the dog saw the dog and the dog saw the cat",
                    "the bird saw the dog and the dog saw the cat",
                    "the cat saw the dog",
                ],
                5.0,
            ),
        ];
        let mut v = WordCounts::new("v");
        v.add_text("the the dog dog saw saw cat cat bird and and");
        let (tasks, report) = build_cloze_set(&records, &ClozeConfig::default(), &[v]).unwrap();
        assert_eq!(report.skipped.len(), 2);
        assert_eq!(report.outside_frequency, 1);
        assert_eq!(report.outside_tail, 1);
        assert_eq!(report.out_of_vocabulary, 1);
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].prefix, "the dog saw the dog and the dog saw the ");
    }
}
