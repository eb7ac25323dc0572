use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the soft targets of several teachers are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherAggregation {
    /// Mean of the per-teacher KL terms.
    #[default]
    MeanKl,
    /// KL to the mean teacher distribution.
    AveragedDistribution,
}

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub dlogits: Array2<T>,
}

fn softmax_row<T: Scalar>(row: ArrayView1<T>, temperature: f64) -> Array1<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64_lossy() / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = row.mapv(|v| (v.to_f64_lossy() / temperature - max).exp());
    let total = out.sum();
    out /= total;
    out
}

/// Row-wise softmax of `logits / temperature`.
pub fn soften<T: Scalar>(logits: &Array2<T>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&softmax_row(src, temperature));
    }
    out
}

fn check_targets(rows: usize, vocab: usize, targets: &[u32]) -> Result<()> {
    if rows != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{rows} logit rows but {} targets",
            targets.len()
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("no positions to score".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::UnknownToken {
            id: bad,
            vocab_size: vocab,
        });
    }
    Ok(())
}

/// Mean next-token cross-entropy over all rows.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[u32]) -> Result<LossGrad<T>> {
    distillation_loss(logits, &[], targets, 1.0, 1.0, TeacherAggregation::MeanKl)
}

/// `alpha * CE + (1 - alpha) * T^2 * KL(teacher_T || student_T)`, averaged
/// over rows. `teachers` holds each teacher's softened distribution (rows
/// sum to one, see [`soften`]). With `alpha == 1` the teachers are ignored.
pub fn distillation_loss<T: Scalar>(
    logits: &Array2<T>,
    teachers: &[Array2<f64>],
    targets: &[u32],
    alpha: f64,
    temperature: f64,
    aggregation: TeacherAggregation,
) -> Result<LossGrad<T>> {
    let (rows, vocab) = logits.dim();
    check_targets(rows, vocab, targets)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let use_kl = alpha < 1.0;
    if use_kl {
        if teachers.is_empty() {
            return Err(Error::InvalidArgument("distillation needs at least one teacher".into()));
        }
        if let Some(t) = teachers.iter().find(|t| t.dim() != (rows, vocab)) {
            return Err(Error::VocabMismatch(format!(
                "teacher distribution {:?} vs student logits {:?}",
                t.dim(),
                (rows, vocab)
            )));
        }
    }
    let n_teachers = teachers.len() as f64;
    let inv_rows = 1.0 / rows as f64;
    let t2 = temperature * temperature;
    let mut dlogits = Array2::<T>::zeros((rows, vocab));
    let mut total = 0.0;
    let mut grad = vec![0.0f64; vocab];
    for r in 0..rows {
        let row = logits.row(r);
        let y = targets[r] as usize;
        grad.iter_mut().for_each(|g| *g = 0.0);
        if alpha > 0.0 {
            let p = softmax_row(row, 1.0);
            total += alpha * -p[y].max(f64::MIN_POSITIVE).ln();
            for (g, &pv) in grad.iter_mut().zip(p.iter()) {
                *g += alpha * pv;
            }
            grad[y] -= alpha;
        }
        if use_kl {
            let q = softmax_row(row, temperature);
            let w = 1.0 - alpha;
            let kl = |p: &dyn Fn(usize) -> f64| -> f64 {
                (0..vocab)
                    .map(|i| {
                        let pi = p(i);
                        if pi > 0.0 {
                            pi * (pi.ln() - q[i].max(f64::MIN_POSITIVE).ln())
                        } else {
                            0.0
                        }
                    })
                    .sum()
            };
            let mean_p = |i: usize| teachers.iter().map(|t| t[[r, i]]).sum::<f64>() / n_teachers;
            let kl_value = match aggregation {
                TeacherAggregation::MeanKl => teachers.iter().map(|t| kl(&|i| t[[r, i]])).sum::<f64>() / n_teachers,
                TeacherAggregation::AveragedDistribution => kl(&mean_p),
            };
            total += w * t2 * kl_value;
            // Both aggregations share the gradient T * (q - mean p).
            for (i, g) in grad.iter_mut().enumerate() {
                *g += w * temperature * (q[i] - mean_p(i));
            }
        }
        for (d, &g) in dlogits.row_mut(r).iter_mut().zip(grad.iter()) {
            *d = T::from_f64_lossy(g * inv_rows);
        }
    }
    Ok(LossGrad {
        loss: total * inv_rows,
        dlogits,
    })
}
