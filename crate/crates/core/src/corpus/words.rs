use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CorpusStore;
use crate::error::{Error, Result};

/// Identifier recorded alongside every vocabulary built with [`words`].
pub const WORD_RULE_ID: &str = "lower-alpha-runs-v1";

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercased maximal alphabetic runs. An apostrophe is kept only when it
/// sits between two letters.
pub fn words(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Byte spans of the words returned by [`words`].
pub(crate) fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].1.is_alphabetic() {
            i += 1;
            continue;
        }
        let start = chars[i].0;
        let mut j = i + 1;
        loop {
            if j < chars.len() && chars[j].1.is_alphabetic() {
                j += 1;
            } else if j + 1 < chars.len() && is_apostrophe(chars[j].1) && chars[j + 1].1.is_alphabetic() {
                j += 2;
            } else {
                break;
            }
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        spans.push((start, end));
        i = j;
    }
    spans
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCounts {
    pub source: String,
    pub word_rule: String,
    pub counts: BTreeMap<String, u64>,
}

impl WordCounts {
    pub fn new(source: impl Into<String>) -> Self {
        WordCounts {
            source: source.into(),
            word_rule: WORD_RULE_ID.into(),
            counts: BTreeMap::new(),
        }
    }

    pub fn add_text(&mut self, text: &str) {
        for w in words(text) {
            *self.counts.entry(w).or_default() += 1;
        }
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Pointwise sum of two vocabularies.
    pub fn merge(&mut self, other: &WordCounts) {
        for (w, c) in &other.counts {
            *self.counts.entry(w.clone()).or_default() += c;
        }
    }
}

/// Exact word tallies over the documents named by `ids`; unknown ids are
/// skipped.
pub fn word_counts(store: &CorpusStore, ids: &[String], source: &str) -> WordCounts {
    let mut counts = WordCounts::new(source);
    for text in store.texts(ids) {
        counts.add_text(text);
    }
    counts
}

/// An evaluation item that can be checked against vocabularies.
pub trait WordBearing {
    /// Words of the item under the same rule as [`words`].
    fn item_words(&self) -> Vec<String>;

    /// Group name used in the retention report.
    fn group(&self) -> String {
        String::new()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRetention {
    pub retained: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome<T> {
    pub retained: Vec<T>,
    pub report: BTreeMap<String, GroupRetention>,
}

impl<T> FilterOutcome<T> {
    pub fn retained_total(&self) -> GroupRetention {
        self.report
            .values()
            .fold(GroupRetention::default(), |acc, g| GroupRetention {
                retained: acc.retained + g.retained,
                total: acc.total + g.total,
            })
    }
}

/// Keeps items whose every word occurs at least `min_count` times in every
/// vocabulary.
pub fn filter_in_vocab<T: WordBearing + Clone>(
    items: &[T],
    vocabularies: &[WordCounts],
    min_count: u64,
) -> Result<FilterOutcome<T>> {
    if vocabularies.is_empty() {
        return Err(Error::InvalidArgument(
            "filter_in_vocab needs at least one vocabulary".into(),
        ));
    }
    let mut retained = Vec::new();
    let mut report: BTreeMap<String, GroupRetention> = BTreeMap::new();
    for item in items {
        let keep = item
            .item_words()
            .iter()
            .all(|w| vocabularies.iter().all(|v| v.count(w) >= min_count));
        let entry = report.entry(item.group()).or_default();
        entry.total += 1;
        if keep {
            entry.retained += 1;
            retained.push(item.clone());
        }
    }
    Ok(FilterOutcome { retained, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Item(&'static str, &'static str);

    impl WordBearing for Item {
        fn item_words(&self) -> Vec<String> {
            words(self.0)
        }
        fn group(&self) -> String {
            self.1.to_string()
        }
    }

    fn vocab(text: &str) -> WordCounts {
        let mut v = WordCounts::new("test");
        v.add_text(text);
        v
    }

    #[test]
    fn hand_count() {
        let v = vocab("The cat saw the cat.");
        assert_eq!(v.counts.len(), 3);
        assert_eq!(v.count("the"), 2);
        assert_eq!(v.count("cat"), 2);
        assert_eq!(v.count("saw"), 1);
        assert_eq!(v.total(), 5);
    }

    #[test]
    fn empty_text_gives_empty_counts() {
        assert!(vocab("").counts.is_empty());
        assert!(vocab("123 ... !!").counts.is_empty());
    }

    #[test]
    fn apostrophes_stay_word_internal() {
        assert_eq!(
            words("Don't 'tis dogs' rock'n'roll"),
            vec!["don't", "tis", "dogs", "rock'n'roll"]
        );
        assert_eq!(words("Café naïve—déjà"), vec!["café", "naïve", "déjà"]);
    }

    #[test]
    fn filter_boundary_at_min_count() {
        let v = vocab("alpha alpha beta gamma gamma gamma");
        let items = vec![Item("alpha gamma", "g1"), Item("beta", "g1"), Item("alpha delta", "g2")];
        let out = filter_in_vocab(&items, &[v.clone()], 2).unwrap();
        assert_eq!(out.retained, vec![items[0].clone()]);
        assert_eq!(out.report["g1"], GroupRetention { retained: 1, total: 2 });
        assert_eq!(out.report["g2"], GroupRetention { retained: 0, total: 1 });

        let all = filter_in_vocab(&items, &[v], 0).unwrap();
        assert_eq!(all.retained, items);
    }

    #[test]
    fn filter_requires_vocabulary() {
        let items = vec![Item("a", "")];
        assert!(filter_in_vocab(&items, &[], 2).is_err());
    }

    #[test]
    fn frequent_everywhere_is_retained() {
        let text = "station ".repeat(5);
        let vs = vec![vocab(&text), vocab(&text)];
        let out = filter_in_vocab(&[Item("Station", "")], &vs, 2).unwrap();
        assert_eq!(out.retained.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn counts_are_additive(a in "[a-z ,.']{0,60}", b in "[a-z ,.']{0,60}") {
                let mut merged = vocab(&a);
                merged.merge(&vocab(&b));
                let joint = vocab(&format!("{a} {b}"));
                prop_assert_eq!(merged.counts, joint.counts);
            }
        }
    }
}
