use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ParamKind, Params};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero.
    #[default]
    Cosine,
    Constant,
}

/// Learning rate at `step` (0-based) out of `total` steps.
pub fn learning_rate(schedule: Schedule, peak: f64, warmup_fraction: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let total = total.max(1);
            let warmup = ((warmup_fraction * total as f64).ceil() as usize).min(total);
            if step < warmup {
                return peak * (step + 1) as f64 / warmup as f64;
            }
            let span = (total - warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adam with decoupled weight decay on weight matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params<T>,
    v: Params<T>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: &ModelConfig, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Params::zeros(config),
            v: Params::zeros(config),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let nb1 = T::from_f64_lossy(1.0 - self.beta1);
        let nb2 = T::from_f64_lossy(1.0 - self.beta2);
        let step_size = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        let kinds: Vec<ParamKind> = grads.named().into_iter().map(|(_, k, _)| k).collect();
        let g = grads.named();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((mut p, (_, _, g)), mut m), mut v), kind) in
            params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs).zip(kinds)
        {
            let decay = if kind == ParamKind::Matrix {
                T::from_f64_lossy(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + nb1 * g;
                    *v = b2 * *v + nb2 * g * g;
                    let denom = (*v * inv_c2).sqrt() + eps;
                    *p = *p * decay - step_size * *m / denom;
                });
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grads.sum_of_squares().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let lr = |s| learning_rate(Schedule::Cosine, 1.0, 0.01, s, 1000);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!((lr(10) - 1.0).abs() < 1e-12);
        assert!(lr(505) < 0.51 && lr(505) > 0.49);
        assert!(lr(999) < 1e-3);
        assert_eq!(learning_rate(Schedule::Constant, 0.5, 0.01, 7, 10), 0.5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            context_length: 4,
            ..Default::default()
        };
        let mut p = Params::<f64>::zeros(&cfg);
        let mut g = Params::<f64>::zeros(&cfg);
        g.embed.fill(3.0);
        g.head.fill(-2.0);
        let mut opt = AdamW::new(&cfg, 0.0);
        opt.update(&mut p, &g, 0.1);
        assert!(p.embed.iter().all(|&v| (v + 0.1).abs() < 1e-6));
        assert!(p.head.iter().all(|&v| (v - 0.1).abs() < 1e-6));
        assert!(p.layers[0].wq.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_skips_norms_and_embeddings() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            context_length: 4,
            ..Default::default()
        };
        let mut p = Params::<f64>::init(&cfg);
        let before = p.clone();
        let g = Params::<f64>::zeros(&cfg);
        let mut opt = AdamW::new(&cfg, 5.0);
        opt.update(&mut p, &g, 0.01);
        assert_eq!(p.embed, before.embed);
        assert_eq!(p.final_norm, before.final_norm);
        for (a, b) in p.head.iter().zip(before.head.iter()) {
            assert!((a - b * 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            context_length: 4,
            ..Default::default()
        };
        let mut g = Params::<f64>::zeros(&cfg);
        g.head.fill(10.0);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.sum_of_squares().sqrt() - 1.0).abs() < 1e-12);
    }
}
