//! Dated documents, time-slice planning, held-out reservation and word
//! vocabularies.

mod ingest;
mod slicing;
mod split;
pub(crate) mod words;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest, ingest_reader, FieldSchema, Rejection, RejectionReport};
pub use slicing::{plan_slices, Budgets, Infeasibility, PlanOutcome, SlicePlan, SliceShortfall, TimeSlice};
pub use split::{split_slice, SplitSet};
pub use words::{
    filter_in_vocab, word_counts, words, FilterOutcome, GroupRetention, WordBearing, WordCounts, WORD_RULE_ID,
};

/// Inclusive interval of calendar years.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn new(start: i32, end: i32) -> Self {
        YearRange { start, end }
    }

    pub fn contains(&self, year: i32) -> bool {
        self.start <= year && year <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    pub year: i32,
    pub text: String,
}

/// Whitespace-delimited token count, used for budgets before any subword
/// tokenizer exists.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Validated, immutable collection of documents with unique ids.
#[derive(Clone, Debug, Default)]
pub struct CorpusStore {
    docs: Vec<Document>,
    index: BTreeMap<String, usize>,
    range: Option<YearRange>,
}

impl CorpusStore {
    /// Builds a store, rejecting duplicates, empty texts and out-of-range
    /// years.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>, range: YearRange) -> (Self, RejectionReport) {
        let mut store = CorpusStore {
            range: Some(range),
            ..Default::default()
        };
        let mut report = RejectionReport::default();
        for doc in docs {
            if let Err(reason) = store.check(&doc) {
                report.push(Rejection {
                    source: "<memory>".into(),
                    line: None,
                    id: Some(doc.id.clone()),
                    reason,
                });
                continue;
            }
            store.insert(doc);
        }
        (store, report)
    }

    pub(crate) fn empty(range: YearRange) -> Self {
        CorpusStore {
            range: Some(range),
            ..Default::default()
        }
    }

    pub(crate) fn check(&self, doc: &Document) -> Result<(), String> {
        if doc.text.is_empty() {
            return Err("empty text".into());
        }
        if let Some(range) = self.range {
            if !range.contains(doc.year) {
                return Err(format!("year {} outside range {}-{}", doc.year, range.start, range.end));
            }
        }
        if self.index.contains_key(&doc.id) {
            return Err(format!("duplicate id {}", doc.id));
        }
        Ok(())
    }

    pub(crate) fn insert(&mut self, doc: Document) {
        self.index.insert(doc.id.clone(), self.docs.len());
        self.docs.push(doc);
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn range(&self) -> Option<YearRange> {
        self.range
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn texts<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        ids.iter().filter_map(move |id| self.get(id).map(|d| d.text.as_str()))
    }
}
