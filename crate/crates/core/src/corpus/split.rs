use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusStore, SlicePlan};
use crate::error::{Error, Result};

/// Document-level train/validation/test reservation for one slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub slice: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub train_tokens: u64,
    pub val_tokens: u64,
    pub test_tokens: u64,
}

/// Shuffles the slice's documents with `seed`, then fills the test split,
/// then validation; everything left is training data. Documents are never
/// divided.
pub fn split_slice(
    plan: &SlicePlan,
    store: &CorpusStore,
    label: &str,
    seed: u64,
    token_counter: &dyn Fn(&str) -> u64,
) -> Result<SplitSet> {
    let slice = plan
        .slice(label)
        .ok_or_else(|| Error::InvalidArgument(format!("no slice labelled {label}")))?;
    let mut docs: Vec<(String, u64)> = plan
        .documents_in(label)
        .into_iter()
        .map(|id| {
            let n = store.get(&id).map(|d| token_counter(&d.text)).unwrap_or(0);
            (id, n)
        })
        .collect();
    let total: u64 = docs.iter().map(|(_, n)| n).sum();
    let reserved = slice.val_budget + slice.test_budget;
    if total < reserved {
        return Err(Error::Other(format!(
            "slice {label} is infeasible: {total} tokens available, {reserved} needed for validation and test"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.shuffle(&mut rng);

    let mut out = SplitSet {
        slice: label.to_string(),
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        train_tokens: 0,
        val_tokens: 0,
        test_tokens: 0,
    };
    for (id, n) in docs {
        if out.test_tokens < slice.test_budget {
            out.test.push(id);
            out.test_tokens += n;
        } else if out.val_tokens < slice.val_budget {
            out.val.push(id);
            out.val_tokens += n;
        } else {
            out.train.push(id);
            out.train_tokens += n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::corpus::{plan_slices, whitespace_tokens, Budgets, Document, YearRange};

    fn fixture(test: u64, val: u64) -> (CorpusStore, SlicePlan) {
        let range = YearRange::new(1800, 1809);
        let docs = (0..10).map(|i| Document {
            id: format!("doc{i}"),
            title: None,
            author: None,
            year: 1800 + i,
            text: vec!["tok"; 100].join(" "),
        });
        let (store, _) = CorpusStore::from_documents(docs, range);
        let budgets = Budgets { train: 0, val, test };
        let plan = plan_slices(&store, 1, budgets, range, &whitespace_tokens)
            .unwrap()
            .into_plan()
            .unwrap();
        (store, plan)
    }

    #[test]
    fn exact_division() {
        let (store, plan) = fixture(200, 100);
        let split = split_slice(&plan, &store, "1800-1809", 7, &whitespace_tokens).unwrap();
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.train.len(), 7);
        let all: BTreeSet<_> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn deterministic_for_seed() {
        let (store, plan) = fixture(200, 100);
        let a = split_slice(&plan, &store, "1800-1809", 3, &whitespace_tokens).unwrap();
        let b = split_slice(&plan, &store, "1800-1809", 3, &whitespace_tokens).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = split_slice(&plan, &store, "1800-1809", 4, &whitespace_tokens).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn oversized_budget_names_slice() {
        let (store, mut plan) = fixture(200, 100);
        plan.slices[0].test_budget = 2000;
        let err = split_slice(&plan, &store, "1800-1809", 1, &whitespace_tokens).unwrap_err();
        assert!(err.to_string().contains("1800-1809"));
    }

    #[test]
    fn unknown_slice() {
        let (store, plan) = fixture(200, 100);
        assert!(split_slice(&plan, &store, "nope", 1, &whitespace_tokens).is_err());
    }
}
