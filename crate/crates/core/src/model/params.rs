use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub mlp_norm: Array1<T>,
    pub w_gate: Array2<T>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
}

/// All trainable tensors. Linear maps are stored input-major, so a layer
/// computes `x.dot(w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    pub head: Array2<T>,
}

/// Whether the optimizer applies weight decay to a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Embedding,
    Norm,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let kv = cfg.kv_dim();
        let layer = || LayerParams {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, kv)),
            wv: Array2::zeros((d, kv)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w_gate: Array2::zeros((d, cfg.d_ff)),
            w_up: Array2::zeros((d, cfg.d_ff)),
            w_down: Array2::zeros((cfg.d_ff, d)),
        };
        Params {
            embed: Array2::zeros((cfg.vocab_size, d)),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            final_norm: Array1::zeros(d),
            head: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Gaussian weights (std 0.02, output projections scaled down by
    /// depth), unit norm gains, seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt()).expect("valid std");
        let mut fill = |a: &mut Array2<T>, dist: &Normal<f64>| {
            a.iter_mut().for_each(|v| *v = T::from_f64_lossy(dist.sample(&mut rng)));
        };
        fill(&mut p.embed, &base);
        for layer in &mut p.layers {
            fill(&mut layer.wq, &base);
            fill(&mut layer.wk, &base);
            fill(&mut layer.wv, &base);
            fill(&mut layer.wo, &resid);
            fill(&mut layer.w_gate, &base);
            fill(&mut layer.w_up, &base);
            fill(&mut layer.w_down, &resid);
            layer.attn_norm.fill(T::one());
            layer.mlp_norm.fill(T::one());
        }
        fill(&mut p.head, &base);
        p.final_norm.fill(T::one());
        p
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, ParamKind, ArrayViewD<'_, T>)> {
        let mut out = vec![(
            "embed.weight".to_string(),
            ParamKind::Embedding,
            self.embed.view().into_dyn(),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.push((n("attn_norm.weight"), ParamKind::Norm, l.attn_norm.view().into_dyn()));
            out.push((n("attn.wq"), ParamKind::Matrix, l.wq.view().into_dyn()));
            out.push((n("attn.wk"), ParamKind::Matrix, l.wk.view().into_dyn()));
            out.push((n("attn.wv"), ParamKind::Matrix, l.wv.view().into_dyn()));
            out.push((n("attn.wo"), ParamKind::Matrix, l.wo.view().into_dyn()));
            out.push((n("mlp_norm.weight"), ParamKind::Norm, l.mlp_norm.view().into_dyn()));
            out.push((n("mlp.w_gate"), ParamKind::Matrix, l.w_gate.view().into_dyn()));
            out.push((n("mlp.w_up"), ParamKind::Matrix, l.w_up.view().into_dyn()));
            out.push((n("mlp.w_down"), ParamKind::Matrix, l.w_down.view().into_dyn()));
        }
        out.push((
            "final_norm.weight".into(),
            ParamKind::Norm,
            self.final_norm.view().into_dyn(),
        ));
        out.push(("head.weight".into(), ParamKind::Matrix, self.head.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = vec![self.embed.view_mut().into_dyn()];
        for l in &mut self.layers {
            out.push(l.attn_norm.view_mut().into_dyn());
            out.push(l.wq.view_mut().into_dyn());
            out.push(l.wk.view_mut().into_dyn());
            out.push(l.wv.view_mut().into_dyn());
            out.push(l.wo.view_mut().into_dyn());
            out.push(l.mlp_norm.view_mut().into_dyn());
            out.push(l.w_gate.view_mut().into_dyn());
            out.push(l.w_up.view_mut().into_dyn());
            out.push(l.w_down.view_mut().into_dyn());
        }
        out.push(self.final_norm.view_mut().into_dyn());
        out.push(self.head.view_mut().into_dyn());
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, _, a)| a.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        let src = other.named();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            let mut dst = dst;
            dst.zip_mut_with(&s, |a, &b| *a += b * scale);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, _, a)| a.iter())
            .map(|v| {
                let f = v.to_f64_lossy();
                f * f
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, _, a)| a.iter().all(|v| v.is_finite()))
    }
}
