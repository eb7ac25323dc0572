use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ClozeTask;
use crate::corpus::TimeSlice;
use crate::error::{Error, Result};

/// Rank of a cloze target in one model's top-k list. Misses carry the
/// sentinel `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeRanking {
    pub task_id: String,
    pub model: String,
    pub rank: usize,
    pub k: usize,
}

impl ClozeRanking {
    pub fn from_position(
        task_id: impl Into<String>,
        model: impl Into<String>,
        position: Option<usize>,
        k: usize,
    ) -> Self {
        ClozeRanking {
            task_id: task_id.into(),
            model: model.into(),
            rank: position.filter(|&p| p < k).unwrap_or(k + 1),
            k,
        }
    }

    pub fn sentinel(&self) -> usize {
        self.k + 1
    }

    /// Completed within the top `k` (`k` may be smaller than the decoded one).
    pub fn hit_at(&self, k: usize) -> bool {
        self.rank < k.min(self.k)
    }

    pub fn hit(&self) -> bool {
        self.hit_at(self.k)
    }

    pub fn reciprocal_rank(&self) -> f64 {
        if self.hit() {
            1.0 / (self.rank + 1) as f64
        } else {
            0.0
        }
    }
}

/// Set arithmetic of completed tasks against a cutoff year. Ratios are
/// `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub model: String,
    pub cutoff_year: i32,
    pub k: usize,
    pub n_past: usize,
    pub n_future: usize,
    pub n_completed_past: usize,
    pub n_completed_future: usize,
    pub recall: Option<f64>,
    pub leakage: Option<f64>,
    pub rnl: Option<f64>,
}

fn task_index(tasks: &[ClozeTask]) -> HashMap<&str, &ClozeTask> {
    tasks.iter().map(|t| (t.id.as_str(), t)).collect()
}

/// `T` holds tasks with sense year `<= cutoff_year`, `F` the rest; a task
/// is completed when ranked below `k`. Rankings for unknown tasks are an
/// error.
pub fn leakage_report(
    model: &str,
    rankings: &[ClozeRanking],
    tasks: &[ClozeTask],
    cutoff_year: i32,
    k: usize,
) -> Result<LeakageReport> {
    let index = task_index(tasks);
    let mut r = LeakageReport {
        model: model.to_string(),
        cutoff_year,
        k,
        n_past: 0,
        n_future: 0,
        n_completed_past: 0,
        n_completed_future: 0,
        recall: None,
        leakage: None,
        rnl: None,
    };
    for ranking in rankings {
        let task = index
            .get(ranking.task_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("ranking for unknown task {}", ranking.task_id)))?;
        let hit = ranking.hit_at(k);
        if task.sense_year <= cutoff_year {
            r.n_past += 1;
            r.n_completed_past += hit as usize;
        } else {
            r.n_future += 1;
            r.n_completed_future += hit as usize;
        }
    }
    if r.n_past > 0 {
        r.recall = Some(r.n_completed_past as f64 / r.n_past as f64);
    }
    if r.n_future > 0 {
        r.leakage = Some(r.n_completed_future as f64 / r.n_future as f64);
    }
    if let (Some(l), Some(rec)) = (r.leakage, r.recall) {
        if rec > 0.0 {
            r.rnl = Some(l / rec);
        }
    }
    Ok(r)
}

/// Mean reciprocal rank; misses contribute zero.
pub fn mrr(rankings: &[ClozeRanking]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no rankings".into()));
    }
    Ok(rankings.iter().map(ClozeRanking::reciprocal_rank).sum::<f64>() / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub n: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub groups: Vec<GroupAccuracy>,
    /// Groups without any ranking.
    pub omitted: Vec<String>,
}

/// Accuracy and MRR per group, in the order of `group_labels`. Tasks that
/// map to no group are ignored.
pub fn grouped_accuracy(
    rankings: &[ClozeRanking],
    tasks: &[ClozeTask],
    group_labels: &[String],
    group_of: impl Fn(&ClozeTask) -> Option<String>,
) -> Result<GroupedAccuracy> {
    let index = task_index(tasks);
    let mut buckets: BTreeMap<String, Vec<&ClozeRanking>> = BTreeMap::new();
    for ranking in rankings {
        let task = index
            .get(ranking.task_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("ranking for unknown task {}", ranking.task_id)))?;
        if let Some(g) = group_of(task) {
            buckets.entry(g).or_default().push(ranking);
        }
    }
    let mut out = GroupedAccuracy::default();
    for label in group_labels {
        match buckets.get(label) {
            Some(rs) if !rs.is_empty() => {
                let hits = rs.iter().filter(|r| r.hit()).count();
                out.groups.push(GroupAccuracy {
                    group: label.clone(),
                    n: rs.len(),
                    hits,
                    accuracy: hits as f64 / rs.len() as f64,
                    mrr: rs.iter().map(|r| r.reciprocal_rank()).sum::<f64>() / rs.len() as f64,
                });
            }
            _ => out.omitted.push(label.clone()),
        }
    }
    Ok(out)
}

/// Groups sense years by time slice; years before the first slice fall into
/// the first, years after the last into the last.
pub fn slice_grouper(slices: &[TimeSlice]) -> impl Fn(&ClozeTask) -> Option<String> + '_ {
    move |task| {
        let first = slices.first()?;
        let last = slices.last()?;
        if task.sense_year < first.start_year {
            return Some(first.label.clone());
        }
        if task.sense_year > last.last_year() {
            return Some(last.label.clone());
        }
        slices
            .iter()
            .find(|s| s.contains(task.sense_year))
            .map(|s| s.label.clone())
    }
}
