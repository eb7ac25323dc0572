use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Llama-style decoder: RMS pre-norm, rotary positions, grouped-query
/// attention and a SwiGLU feed-forward block.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: Params<T>,
    rope_cos: Array2<T>,
    rope_sin: Array2<T>,
}

/// Keys and values of already-processed positions, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    layers: Vec<(Array2<T>, Array2<T>)>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct LayerCache<T> {
    x_in: Array2<T>,
    rinv1: Array1<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    x_mid: Array2<T>,
    rinv2: Array1<T>,
    h2: Array2<T>,
    gate: Array2<T>,
    up: Array2<T>,
    act: Array2<T>,
}

/// Activations kept by [`Transformer::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    spans: Vec<(usize, usize)>,
    layers: Vec<LayerCache<T>>,
    x_final: Array2<T>,
    rinv_f: Array1<T>,
    h_f: Array2<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self::assemble(config, params))
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        if params.layers.len() != config.n_layers {
            return Err(Error::ShapeMismatch {
                name: "layers".into(),
                expected: vec![config.n_layers],
                found: vec![params.layers.len()],
            });
        }
        for ((name, _, e), (_, _, f)) in expected.named().iter().zip(params.named().iter()) {
            if e.shape() != f.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: e.shape().to_vec(),
                    found: f.shape().to_vec(),
                });
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Params<T>) -> Self {
        let half = config.head_dim() / 2;
        let mut rope_cos = Array2::zeros((config.context_length, half));
        let mut rope_sin = Array2::zeros((config.context_length, half));
        for pos in 0..config.context_length {
            for i in 0..half {
                let freq = config.rope_theta.powf(-2.0 * i as f64 / config.head_dim() as f64);
                let angle = pos as f64 * freq;
                rope_cos[[pos, i]] = lit(angle.cos());
                rope_sin[[pos, i]] = lit(angle.sin());
            }
        }
        Transformer {
            config,
            params,
            rope_cos,
            rope_sin,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::UnknownToken {
                    id: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Array2<T> {
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.params.embed.row(t as usize));
        }
        x
    }

    /// Rotates each head's (even, odd) coordinate pairs by its position's
    /// angle; `inverse` applies the transpose rotation.
    fn rope(&self, x: &mut Array2<T>, positions: &[usize], n_heads: usize, inverse: bool) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        for (mut row, &pos) in x.rows_mut().into_iter().zip(positions) {
            let cos = self.rope_cos.row(pos);
            let sin = self.rope_sin.row(pos);
            for h in 0..n_heads {
                let base = h * hd;
                for i in 0..half {
                    let (a, b) = (row[base + 2 * i], row[base + 2 * i + 1]);
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }

    /// Causal attention of `q` rows (absolute positions `offset..`) over all
    /// `k`/`v` rows. Returns the concatenated head outputs and, when asked,
    /// the attention probabilities per head.
    fn attend(
        &self,
        q: ArrayView2<T>,
        k: ArrayView2<T>,
        v: ArrayView2<T>,
        offset: usize,
        keep: bool,
    ) -> (Array2<T>, Vec<Array2<T>>) {
        let hd = self.config.head_dim();
        let group = self.config.n_heads / self.config.n_kv_heads;
        let scale: T = lit(1.0 / (hd as f64).sqrt());
        let (t, s_len) = (q.nrows(), k.nrows());
        let mut ctx = Array2::zeros((t, self.config.d_model));
        let mut probs = Vec::new();
        for h in 0..self.config.n_heads {
            let kvh = h / group;
            let qh = q.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = k.slice(s![.., kvh * hd..(kvh + 1) * hd]);
            let vh = v.slice(s![.., kvh * hd..(kvh + 1) * hd]);
            let mut scores = qh.dot(&kh.t());
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let visible = (offset + i + 1).min(s_len);
                let mut max = T::neg_infinity();
                for j in 0..visible {
                    row[j] *= scale;
                    if row[j] > max {
                        max = row[j];
                    }
                }
                let mut sum = T::zero();
                for j in 0..visible {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in 0..visible {
                    row[j] /= sum;
                }
                for j in visible..s_len {
                    row[j] = T::zero();
                }
            }
            ctx.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&scores.dot(&vh));
            if keep {
                probs.push(scores);
            }
        }
        (ctx, probs)
    }

    /// Logits for every position of a single sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<T>> {
        Ok(self.prefill(tokens, None)?.0)
    }

    /// Runs `tokens` after the positions held in `past`, returning their
    /// logits and the cache extended by them.
    pub fn prefill(&self, tokens: &[u32], past: Option<&KvCache<T>>) -> Result<(Array2<T>, KvCache<T>)> {
        self.check_tokens(tokens)?;
        let start = past.map_or(0, |p| p.len);
        let total = start + tokens.len();
        if total > self.config.context_length {
            return Err(Error::SequenceTooLong {
                len: total,
                context_length: self.config.context_length,
            });
        }
        let eps: T = lit(self.config.norm_eps);
        let positions: Vec<usize> = (start..total).collect();
        let mut x = self.embed(tokens);
        let mut new_layers = Vec::with_capacity(self.config.n_layers);
        for (li, layer) in self.params.layers.iter().enumerate() {
            let (h1, _) = rmsnorm(&x, &layer.attn_norm, eps);
            let mut q = h1.dot(&layer.wq);
            let mut k = h1.dot(&layer.wk);
            let v = h1.dot(&layer.wv);
            self.rope(&mut q, &positions, self.config.n_heads, false);
            self.rope(&mut k, &positions, self.config.n_kv_heads, false);
            let (k_all, v_all) = match past {
                Some(p) => {
                    let (pk, pv) = &p.layers[li];
                    (
                        ndarray::concatenate(Axis(0), &[pk.view(), k.view()]).expect("same width"),
                        ndarray::concatenate(Axis(0), &[pv.view(), v.view()]).expect("same width"),
                    )
                }
                None => (k, v),
            };
            let (ctx, _) = self.attend(q.view(), k_all.view(), v_all.view(), start, false);
            x = x + ctx.dot(&layer.wo);
            let (h2, _) = rmsnorm(&x, &layer.mlp_norm, eps);
            let gate = h2.dot(&layer.w_gate);
            let up = h2.dot(&layer.w_up);
            let act = Zip::from(&gate).and(&up).map_collect(|&g, &u| silu(g) * u);
            x = x + act.dot(&layer.w_down);
            new_layers.push((k_all, v_all));
        }
        let (hf, _) = rmsnorm(&x, &self.params.final_norm, eps);
        let logits = hf.dot(&self.params.head);
        Ok((
            logits,
            KvCache {
                layers: new_layers,
                len: total,
            },
        ))
    }

    /// Batched forward pass keeping every activation needed by
    /// [`backward`](Self::backward). Row `r` of the logits belongs to the
    /// concatenation of all sequences.
    pub fn forward_train(&self, batch: &[&[u32]]) -> Result<(Array2<T>, ForwardCache<T>)> {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        let mut positions = Vec::new();
        for seq in batch {
            if seq.len() > self.config.context_length {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    context_length: self.config.context_length,
                });
            }
            self.check_tokens(seq)?;
            spans.push((tokens.len(), seq.len()));
            tokens.extend_from_slice(seq);
            positions.extend(0..seq.len());
        }
        let eps: T = lit(self.config.norm_eps);
        let mut x = self.embed(&tokens);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for layer in &self.params.layers {
            let x_in = x;
            let (h1, rinv1) = rmsnorm(&x_in, &layer.attn_norm, eps);
            let mut q = h1.dot(&layer.wq);
            let mut k = h1.dot(&layer.wk);
            let v = h1.dot(&layer.wv);
            self.rope(&mut q, &positions, self.config.n_heads, false);
            self.rope(&mut k, &positions, self.config.n_kv_heads, false);
            let mut ctx = Array2::zeros((tokens.len(), self.config.d_model));
            let mut probs = Vec::with_capacity(spans.len() * self.config.n_heads);
            for &(start, len) in &spans {
                let rows = s![start..start + len, ..];
                let (c, p) = self.attend(q.slice(rows), k.slice(rows), v.slice(rows), 0, true);
                ctx.slice_mut(rows).assign(&c);
                probs.extend(p);
            }
            let x_mid = &x_in + &ctx.dot(&layer.wo);
            let (h2, rinv2) = rmsnorm(&x_mid, &layer.mlp_norm, eps);
            let gate = h2.dot(&layer.w_gate);
            let up = h2.dot(&layer.w_up);
            let act = Zip::from(&gate).and(&up).map_collect(|&g, &u| silu(g) * u);
            x = &x_mid + &act.dot(&layer.w_down);
            layers.push(LayerCache {
                x_in,
                rinv1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                rinv2,
                h2,
                gate,
                up,
                act,
            });
        }
        let (h_f, rinv_f) = rmsnorm(&x, &self.params.final_norm, eps);
        let logits = h_f.dot(&self.params.head);
        Ok((
            logits,
            ForwardCache {
                tokens,
                spans,
                layers,
                x_final: x,
                rinv_f,
                h_f,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits of
    /// [`forward_train`](Self::forward_train).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Array2<T>) -> Params<T> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale: T = lit(1.0 / (hd as f64).sqrt());
        let mut grads = Params::zeros(cfg);
        let positions: Vec<usize> = cache.spans.iter().flat_map(|&(_, len)| 0..len).collect();

        grads.head = cache.h_f.t().dot(dlogits);
        let dh_f = dlogits.dot(&self.params.head.t());
        let (mut dx, dg) = rmsnorm_backward(&cache.x_final, &self.params.final_norm, &cache.rinv_f, &dh_f);
        grads.final_norm = dg;

        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let g = &mut grads.layers[li];

            // feed-forward block
            g.w_down = c.act.t().dot(&dx);
            let dact = dx.dot(&layer.w_down.t());
            let mut dgate = Array2::zeros(c.gate.raw_dim());
            let mut dup = Array2::zeros(c.up.raw_dim());
            Zip::from(&mut dgate)
                .and(&mut dup)
                .and(&dact)
                .and(&c.gate)
                .and(&c.up)
                .for_each(|dg, du, &da, &gt, &u| {
                    let sig = sigmoid(gt);
                    *du = da * gt * sig;
                    *dg = da * u * sig * (T::one() + gt * (T::one() - sig));
                });
            g.w_gate = c.h2.t().dot(&dgate);
            g.w_up = c.h2.t().dot(&dup);
            let dh2 = dgate.dot(&layer.w_gate.t()) + dup.dot(&layer.w_up.t());
            let (dx_norm2, dg2) = rmsnorm_backward(&c.x_mid, &layer.mlp_norm, &c.rinv2, &dh2);
            g.mlp_norm = dg2;
            let dx_mid = dx + dx_norm2;

            // attention block
            g.wo = c.ctx.t().dot(&dx_mid);
            let dctx = dx_mid.dot(&layer.wo.t());
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for (si, &(start, len)) in cache.spans.iter().enumerate() {
                let rows = start..start + len;
                for h in 0..cfg.n_heads {
                    let kvh = h / group;
                    let qcols = h * hd..(h + 1) * hd;
                    let kcols = kvh * hd..(kvh + 1) * hd;
                    let p = &c.probs[si * cfg.n_heads + h];
                    let dctx_h = dctx.slice(s![rows.clone(), qcols.clone()]);
                    let vh = c.v.slice(s![rows.clone(), kcols.clone()]);
                    let kh = c.k.slice(s![rows.clone(), kcols.clone()]);
                    let qh = c.q.slice(s![rows.clone(), qcols.clone()]);
                    let mut dp = dctx_h.dot(&vh.t());
                    {
                        let mut dvh = dv.slice_mut(s![rows.clone(), kcols.clone()]);
                        dvh += &p.t().dot(&dctx_h);
                    }
                    for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                        let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                        drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot) * scale);
                    }
                    dq.slice_mut(s![rows.clone(), qcols]).assign(&dp.dot(&kh));
                    let mut dkh = dk.slice_mut(s![rows.clone(), kcols]);
                    dkh += &dp.t().dot(&qh);
                }
            }
            self.rope(&mut dq, &positions, cfg.n_heads, true);
            self.rope(&mut dk, &positions, cfg.n_kv_heads, true);
            g.wq = c.h1.t().dot(&dq);
            g.wk = c.h1.t().dot(&dk);
            g.wv = c.h1.t().dot(&dv);
            let dh1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            let (dx_norm1, dg1) = rmsnorm_backward(&c.x_in, &layer.attn_norm, &c.rinv1, &dh1);
            g.attn_norm = dg1;
            dx = dx_mid + dx_norm1;
        }

        for (row, &t) in dx.rows().into_iter().zip(&cache.tokens) {
            let mut e = grads.embed.row_mut(t as usize);
            e += &row;
        }
        grads
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// `y = x / rms(x) * g` row-wise; also returns `1 / rms` per row.
fn rmsnorm<T: Scalar>(x: &Array2<T>, g: &Array1<T>, eps: T) -> (Array2<T>, Array1<T>) {
    let d: T = lit(x.ncols() as f64);
    let mut y = x.clone();
    let mut rinv = Array1::zeros(x.nrows());
    for (mut row, r) in y.rows_mut().into_iter().zip(rinv.iter_mut()) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (ms + eps).sqrt();
        let rr = *r;
        row.zip_mut_with(g, |v, &gv| *v = *v * rr * gv);
    }
    (y, rinv)
}

fn rmsnorm_backward<T: Scalar>(
    x: &Array2<T>,
    g: &Array1<T>,
    rinv: &Array1<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array1<T>) {
    let d: T = lit(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dg = Array1::zeros(g.len());
    for ((xr, dyr), (mut dxr, &r)) in x
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut().into_iter().zip(rinv.iter()))
    {
        let mut dot = T::zero();
        for j in 0..xr.len() {
            dot += dyr[j] * g[j] * xr[j];
            dg[j] += dyr[j] * xr[j] * r;
        }
        let coef = r * r * r * dot / d;
        for j in 0..xr.len() {
            dxr[j] = r * g[j] * dyr[j] - coef * xr[j];
        }
    }
    (dx, dg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 16,
            d_ff: 24,
            vocab_size: 20,
            context_length: 12,
            seed,
            ..Default::default()
        }
    }

    fn model(seed: u64) -> Transformer<f64> {
        let mut m = Transformer::<f64>::new(toy_config(seed)).unwrap();
        // Larger weights make the check sensitive to every term.
        m.params_mut().scale(8.0);
        for l in &mut m.params_mut().layers {
            l.attn_norm.mapv_inplace(|v| v / 8.0 + 0.3);
            l.mlp_norm.mapv_inplace(|v| v / 8.0 - 0.2);
        }
        m
    }

    #[test]
    fn parameter_count_matches_formula() {
        let cfg = toy_config(0);
        let m = Transformer::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn same_seed_same_logits() {
        let a = Transformer::<f32>::new(toy_config(9)).unwrap();
        let b = Transformer::<f32>::new(toy_config(9)).unwrap();
        let toks = [1, 5, 7, 3];
        assert_eq!(a.logits(&toks).unwrap(), b.logits(&toks).unwrap());
        let c = Transformer::<f32>::new(toy_config(10)).unwrap();
        assert_ne!(a.logits(&toks).unwrap(), c.logits(&toks).unwrap());
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let m = model(3);
        let a = m.logits(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 9, 9]).unwrap();
        for t in 0..3 {
            for v in 0..20 {
                assert_eq!(a[[t, v]], b[[t, v]]);
            }
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = model(4);
        let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = m.logits(&toks).unwrap();
        let (first, cache) = m.prefill(&toks[..5], None).unwrap();
        let (rest, _) = m.prefill(&toks[5..], Some(&cache)).unwrap();
        for t in 0..5 {
            for v in 0..20 {
                assert!((full[[t, v]] - first[[t, v]]).abs() < 1e-12);
            }
        }
        for t in 5..8 {
            for v in 0..20 {
                assert!((full[[t, v]] - rest[[t - 5, v]]).abs() < 1e-10);
            }
        }
        let (train, _) = m.forward_train(&[&toks[..3], &toks]).unwrap();
        for t in 0..8 {
            for v in 0..20 {
                assert!((full[[t, v]] - train[[t + 3, v]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_long_sequences_and_bad_ids() {
        let m = model(1);
        assert!(matches!(m.logits(&[0; 13]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.logits(&[25]), Err(Error::UnknownToken { .. })));
    }

    /// Loss = sum of logits weighted by a fixed random matrix; its gradient
    /// with respect to the logits is that matrix.
    #[test]
    fn backward_matches_finite_differences() {
        let m = model(5);
        let batch: Vec<Vec<u32>> = vec![vec![1, 4, 2, 7, 7, 3], vec![5, 0, 19]];
        let refs: Vec<&[u32]> = batch.iter().map(|v| v.as_slice()).collect();
        let (logits, cache) = m.forward_train(&refs).unwrap();
        let weights = Array2::from_shape_fn(logits.raw_dim(), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        let loss = |mm: &Transformer<f64>| -> f64 {
            let (l, _) = mm.forward_train(&refs).unwrap();
            (&l * &weights).sum()
        };
        let grads = m.backward(&cache, &weights);
        let h = 1e-5;
        let names = m.params().named();
        let grad_named = grads.named();
        let mut worst: f64 = 0.0;
        for (ti, (name, _, tensor)) in names.iter().enumerate() {
            let n = tensor.len();
            let step = (n / 7).max(1);
            for idx in (0..n).step_by(step) {
                let mut plus = m.clone();
                plus.params_mut().tensors_mut()[ti].as_slice_mut().unwrap()[idx] += h;
                let mut minus = m.clone();
                minus.params_mut().tensors_mut()[ti].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grad_named[ti].2.as_slice().unwrap()[idx];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                assert!(rel < 1e-5, "{name}[{idx}]: numeric {numeric} analytic {analytic}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5);
    }
}
