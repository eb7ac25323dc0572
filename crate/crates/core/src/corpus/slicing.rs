use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorpusStore, YearRange};
use crate::error::{Error, Result};

/// Token budgets each slice must meet, per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl Budgets {
    pub fn total(&self) -> u64 {
        self.train + self.val + self.test
    }
}

/// A contiguous run of years. Non-final slices are half-open
/// `[start_year, end_year)`; the final slice of a plan is closed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub label: String,
    pub start_year: i32,
    pub end_year: i32,
    pub end_inclusive: bool,
    pub train_budget: u64,
    pub val_budget: u64,
    pub test_budget: u64,
}

impl TimeSlice {
    pub fn contains(&self, year: i32) -> bool {
        year >= self.start_year
            && if self.end_inclusive {
                year <= self.end_year
            } else {
                year < self.end_year
            }
    }

    /// Last year inside the slice, used as the knowledge cutoff of its model.
    pub fn last_year(&self) -> i32 {
        if self.end_inclusive {
            self.end_year
        } else {
            self.end_year - 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub range: YearRange,
    pub slices: Vec<TimeSlice>,
    /// Document id to slice label; `None` marks an unassigned document.
    pub assignment: BTreeMap<String, Option<String>>,
    /// Realized whitespace tokens per slice label.
    pub realized_tokens: BTreeMap<String, u64>,
}

impl SlicePlan {
    pub fn slice(&self, label: &str) -> Option<&TimeSlice> {
        self.slices.iter().find(|s| s.label == label)
    }

    pub fn labels(&self) -> Vec<String> {
        self.slices.iter().map(|s| s.label.clone()).collect()
    }

    pub fn slice_for_year(&self, year: i32) -> Option<&TimeSlice> {
        self.slices.iter().find(|s| s.contains(year))
    }

    /// Ids assigned to `label`, in id order.
    pub fn documents_in(&self, label: &str) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, l)| l.as_deref() == Some(label))
            .map(|(id, _)| id.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceShortfall {
    pub index: usize,
    /// Years the slice would have covered; `None` when no years were left.
    pub years: Option<(i32, i32)>,
    pub available: u64,
    pub required: u64,
}

impl SliceShortfall {
    pub fn shortfall(&self) -> u64 {
        self.required.saturating_sub(self.available)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infeasibility {
    pub n_slices: usize,
    pub total_available: u64,
    pub total_required: u64,
    pub shortfalls: Vec<SliceShortfall>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlanOutcome {
    Feasible(SlicePlan),
    Infeasible(Infeasibility),
}

impl PlanOutcome {
    pub fn plan(&self) -> Option<&SlicePlan> {
        match self {
            PlanOutcome::Feasible(p) => Some(p),
            PlanOutcome::Infeasible(_) => None,
        }
    }

    pub fn into_plan(self) -> std::result::Result<SlicePlan, Infeasibility> {
        match self {
            PlanOutcome::Feasible(p) => Ok(p),
            PlanOutcome::Infeasible(i) => Err(i),
        }
    }
}

/// Greedy left-to-right boundary search over a per-year token histogram.
///
/// Returns the start year of every slice; slice `i` spans
/// `[starts[i], starts[i + 1])` and the last slice runs to `range.end`
/// inclusive.
pub(crate) fn greedy_starts(
    histogram: &BTreeMap<i32, u64>,
    range: YearRange,
    n_slices: usize,
    required: u64,
) -> std::result::Result<Vec<i32>, Vec<SliceShortfall>> {
    let tokens_in = |lo: i32, hi_inclusive: i32| -> u64 {
        if lo > hi_inclusive {
            return 0;
        }
        histogram.range(lo..=hi_inclusive).map(|(_, &t)| t).sum()
    };
    let mut starts = Vec::with_capacity(n_slices);
    let mut shortfalls = Vec::new();
    let mut start = range.start;
    for index in 0..n_slices {
        if start > range.end {
            shortfalls.push(SliceShortfall {
                index,
                years: None,
                available: 0,
                required,
            });
            continue;
        }
        starts.push(start);
        if index + 1 == n_slices {
            let available = tokens_in(start, range.end);
            if available < required {
                shortfalls.push(SliceShortfall {
                    index,
                    years: Some((start, range.end)),
                    available,
                    required,
                });
            }
            break;
        }
        let mut acc = 0u64;
        let mut end = None;
        for (&year, &t) in histogram.range(start..=range.end) {
            acc += t;
            if acc >= required {
                end = Some(year + 1);
                break;
            }
        }
        match end {
            Some(e) => start = e,
            None => {
                shortfalls.push(SliceShortfall {
                    index,
                    years: Some((start, range.end)),
                    available: acc,
                    required,
                });
                start = range.end + 1;
            }
        }
    }
    if shortfalls.is_empty() {
        Ok(starts)
    } else {
        Err(shortfalls)
    }
}

/// Partitions `range` into `n_slices` consecutive slices of minimal
/// duration, each holding at least `budgets.total()` tokens.
pub fn plan_slices(
    store: &CorpusStore,
    n_slices: usize,
    budgets: Budgets,
    range: YearRange,
    token_counter: &dyn Fn(&str) -> u64,
) -> Result<PlanOutcome> {
    if n_slices == 0 {
        return Err(Error::InvalidArgument("n_slices must be at least 1".into()));
    }
    if store.is_empty() {
        return Err(Error::InvalidArgument("corpus store is empty".into()));
    }
    if range.start > range.end {
        return Err(Error::InvalidArgument(format!(
            "empty year range {}-{}",
            range.start, range.end
        )));
    }
    let mut histogram: BTreeMap<i32, u64> = BTreeMap::new();
    let mut doc_tokens = Vec::with_capacity(store.len());
    for doc in store.documents() {
        let n = token_counter(&doc.text);
        doc_tokens.push(n);
        if range.contains(doc.year) {
            *histogram.entry(doc.year).or_default() += n;
        }
    }
    let required = budgets.total();
    let starts = match greedy_starts(&histogram, range, n_slices, required) {
        Ok(s) => s,
        Err(shortfalls) => {
            return Ok(PlanOutcome::Infeasible(Infeasibility {
                n_slices,
                total_available: histogram.values().sum(),
                total_required: required * n_slices as u64,
                shortfalls,
            }))
        }
    };

    let slices: Vec<TimeSlice> = starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let last = i + 1 == starts.len();
            let end_year = if last { range.end } else { starts[i + 1] };
            TimeSlice {
                label: format!("{start}-{end_year}"),
                start_year: start,
                end_year,
                end_inclusive: last,
                train_budget: budgets.train,
                val_budget: budgets.val,
                test_budget: budgets.test,
            }
        })
        .collect();

    let mut assignment = BTreeMap::new();
    let mut realized: BTreeMap<String, u64> = slices.iter().map(|s| (s.label.clone(), 0)).collect();
    for (doc, &n) in store.documents().iter().zip(&doc_tokens) {
        let label = slices.iter().find(|s| s.contains(doc.year)).map(|s| s.label.clone());
        if let Some(l) = &label {
            *realized.get_mut(l).expect("label exists") += n;
        }
        assignment.insert(doc.id.clone(), label);
    }
    Ok(PlanOutcome::Feasible(SlicePlan {
        range,
        slices,
        assignment,
        realized_tokens: realized,
    }))
}
