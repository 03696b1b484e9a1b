use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayViewMut2, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{cast, gelu, gelu_grad, impl_parameterized, Ctx, LayerNorm, LayerNormCache, Linear};
use super::Real;

/// Scaled dot-product attention with `heads` heads and bias-free projections.
///
/// Query batches may be shared by several key/value batches: key/value batch `b`
/// attends with query batch `b / rep`, where `rep = kv_batches / q_batches`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<A> {
    heads: usize,
    pub wq: Linear<A>,
    pub wk: Linear<A>,
    pub wv: Linear<A>,
    pub wo: Linear<A>,
}

impl_parameterized!(MultiHeadAttention { wq, wk, wv, wo });

pub struct AttentionCache<A> {
    q_in: Array2<A>,
    kv_in: Option<Array2<A>>,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    probs: Array4<A>,
    ctx: Array2<A>,
    bq: usize,
    tq: usize,
    bk: usize,
    tk: usize,
}

fn softmax_rows<A: Real>(m: &mut ArrayViewMut2<A>) {
    for mut row in m.rows_mut() {
        let max = row.fold(A::neg_infinity(), |a, &b| a.max(b));
        let mut sum = A::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = A::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

impl<A: Real> MultiHeadAttention<A> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            heads,
            wq: Linear::new(dim, dim, false, rng),
            wk: Linear::new(dim, dim, false, rng),
            wv: Linear::new(dim, dim, false, rng),
            wo: Linear::new(dim, dim, false, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.d_in()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward_self(&self, x: Array3<A>) -> (Array3<A>, AttentionCache<A>) {
        let (b, t, d) = x.dim();
        let x2 = x.into_shape_with_order((b * t, d)).expect("standard layout");
        self.forward_impl(x2, None, (b, t), (b, t))
    }

    pub fn forward_cross(&self, q_in: Array3<A>, kv_in: Array3<A>) -> (Array3<A>, AttentionCache<A>) {
        let (bq, tq, d) = q_in.dim();
        let (bk, tk, dk) = kv_in.dim();
        assert_eq!(d, dk, "query and key/value widths differ");
        assert!(bq > 0 && bk % bq == 0, "key/value batches must be a multiple of query batches");
        let q2 = q_in.into_shape_with_order((bq * tq, d)).expect("standard layout");
        let kv2 = kv_in.into_shape_with_order((bk * tk, d)).expect("standard layout");
        self.forward_impl(q2, Some(kv2), (bq, tq), (bk, tk))
    }

    fn forward_impl(
        &self,
        q_in: Array2<A>,
        kv_in: Option<Array2<A>>,
        (bq, tq): (usize, usize),
        (bk, tk): (usize, usize),
    ) -> (Array3<A>, AttentionCache<A>) {
        let d = self.dim();
        let h = self.heads;
        let dh = d / h;
        let rep = bk / bq;
        let scale: A = cast(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(q_in.view());
        let src = kv_in.as_ref().unwrap_or(&q_in);
        let k = self.wk.forward(src.view());
        let v = self.wv.forward(src.view());
        let q4 = q.view().into_shape_with_order((bq, tq, h, dh)).expect("shape");
        let k4 = k.view().into_shape_with_order((bk, tk, h, dh)).expect("shape");
        let v4 = v.view().into_shape_with_order((bk, tk, h, dh)).expect("shape");

        let mut probs = Array4::zeros((bk, h, tq, tk));
        let mut ctx = Array4::zeros((bk, tq, h, dh));
        for b in 0..bk {
            let qb = b / rep;
            for hh in 0..h {
                let mut p = probs.slice_mut(s![b, hh, .., ..]);
                general_mat_mul(
                    scale,
                    &q4.slice(s![qb, .., hh, ..]),
                    &k4.slice(s![b, .., hh, ..]).t(),
                    A::zero(),
                    &mut p,
                );
                softmax_rows(&mut p);
                general_mat_mul(
                    A::one(),
                    &p.view(),
                    &v4.slice(s![b, .., hh, ..]),
                    A::zero(),
                    &mut ctx.slice_mut(s![b, .., hh, ..]),
                );
            }
        }
        let ctx = ctx.into_shape_with_order((bk * tq, d)).expect("standard layout");
        let out = self.wo.forward(ctx.view());
        let out = out.into_shape_with_order((bk, tq, d)).expect("standard layout");
        (out, AttentionCache { q_in, kv_in, q, k, v, probs, ctx, bq, tq, bk, tk })
    }

    /// Returns `(d_query_input, d_kv_input)`. For self-attention both paths are
    /// folded into the first element and the second is `None`.
    pub fn backward(
        &mut self,
        cache: AttentionCache<A>,
        dout: Array3<A>,
    ) -> (Array3<A>, Option<Array3<A>>) {
        let AttentionCache { q_in, kv_in, q, k, v, probs, ctx, bq, tq, bk, tk } = cache;
        let d = self.dim();
        let h = self.heads;
        let dh = d / h;
        let rep = bk / bq;
        let scale: A = cast(1.0 / (dh as f64).sqrt());

        let dout2 = dout.into_shape_with_order((bk * tq, d)).expect("standard layout");
        let dctx = self.wo.backward(ctx.view(), dout2.view());
        drop(ctx);
        let dctx4 = dctx.view().into_shape_with_order((bk, tq, h, dh)).expect("shape");
        let q4 = q.view().into_shape_with_order((bq, tq, h, dh)).expect("shape");
        let k4 = k.view().into_shape_with_order((bk, tk, h, dh)).expect("shape");
        let v4 = v.view().into_shape_with_order((bk, tk, h, dh)).expect("shape");

        let mut dq = Array4::<A>::zeros((bq, tq, h, dh));
        let mut dk = Array4::<A>::zeros((bk, tk, h, dh));
        let mut dv = Array4::<A>::zeros((bk, tk, h, dh));
        let mut dp = Array2::<A>::zeros((tq, tk));
        for b in 0..bk {
            let qb = b / rep;
            for hh in 0..h {
                let p = probs.slice(s![b, hh, .., ..]);
                let dc = dctx4.slice(s![b, .., hh, ..]);
                general_mat_mul(A::one(), &dc, &v4.slice(s![b, .., hh, ..]).t(), A::zero(), &mut dp);
                general_mat_mul(A::one(), &p.t(), &dc, A::zero(), &mut dv.slice_mut(s![b, .., hh, ..]));
                for (mut dr, pr) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot = dr.iter().zip(pr.iter()).fold(A::zero(), |acc, (&x, &y)| acc + x * y);
                    dr.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot));
                }
                general_mat_mul(
                    scale,
                    &dp,
                    &k4.slice(s![b, .., hh, ..]),
                    A::one(),
                    &mut dq.slice_mut(s![qb, .., hh, ..]),
                );
                general_mat_mul(
                    scale,
                    &dp.t(),
                    &q4.slice(s![qb, .., hh, ..]),
                    A::zero(),
                    &mut dk.slice_mut(s![b, .., hh, ..]),
                );
            }
        }
        drop(probs);
        let dq2 = dq.into_shape_with_order((bq * tq, d)).expect("standard layout");
        let dk2 = dk.into_shape_with_order((bk * tk, d)).expect("standard layout");
        let dv2 = dv.into_shape_with_order((bk * tk, d)).expect("standard layout");

        let mut dq_in = self.wq.backward(q_in.view(), dq2.view());
        let src = kv_in.as_ref().unwrap_or(&q_in);
        let mut dkv = self.wk.backward(src.view(), dk2.view());
        dkv += &self.wv.backward(src.view(), dv2.view());
        if kv_in.is_none() {
            dq_in += &dkv;
            let dq_in = dq_in.into_shape_with_order((bq, tq, d)).expect("standard layout");
            (dq_in, None)
        } else {
            let dq_in = dq_in.into_shape_with_order((bq, tq, d)).expect("standard layout");
            let dkv = dkv.into_shape_with_order((bk, tk, d)).expect("standard layout");
            (dq_in, Some(dkv))
        }
    }
}

fn mask2<A: Real>(m: &Option<ArrayD<A>>) -> Option<ndarray::ArrayView2<'_, A>> {
    m.as_ref().map(|m| m.view().into_dimensionality::<Ix2>().expect("2-d mask"))
}

/// Pre-norm transformer layer: self-attention and a GELU feed-forward
/// network, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer<A> {
    pub ln1: LayerNorm<A>,
    pub attn: MultiHeadAttention<A>,
    pub ln2: LayerNorm<A>,
    pub ff1: Linear<A>,
    pub ff2: Linear<A>,
    dropout: f64,
}

impl_parameterized!(TransformerLayer { ln1, attn, ln2, ff1, ff2 });

pub struct TransformerCache<A> {
    ln1: LayerNormCache<A>,
    attn: AttentionCache<A>,
    ln2: LayerNormCache<A>,
    h2: Array2<A>,
    u: Array2<A>,
    drop_attn: Option<ArrayD<A>>,
    drop_ffn: Option<ArrayD<A>>,
    shape: (usize, usize, usize),
}

impl<A: Real> TransformerLayer<A> {
    pub fn new(dim: usize, heads: usize, ffn: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(dim, ffn, true, rng),
            ff2: Linear::new(ffn, dim, true, rng),
            dropout,
        }
    }

    /// `x` is `[batch, seq, dim]`; attention runs along `seq` independently per batch row.
    pub fn forward(&self, x: Array3<A>, ctx: &mut Ctx) -> (Array3<A>, TransformerCache<A>) {
        let shape = x.dim();
        let (b, t, d) = shape;
        let mut x1 = x.into_shape_with_order((b * t, d)).expect("standard layout");
        let (h, ln1) = self.ln1.forward(x1.view());
        let h = h.into_shape_with_order((b, t, d)).expect("standard layout");
        let (a, attn) = self.attn.forward_self(h);
        let mut a = a.into_shape_with_order((b * t, d)).expect("standard layout");
        let drop_attn = ctx.dropout_mask::<A>(&[b * t, d], self.dropout);
        if let Some(m) = mask2(&drop_attn) {
            a *= &m;
        }
        x1 += &a;
        drop(a);
        let (h2, ln2) = self.ln2.forward(x1.view());
        let u = self.ff1.forward(h2.view());
        let mut f = self.ff2.forward(u.mapv(gelu).view());
        let drop_ffn = ctx.dropout_mask::<A>(&[b * t, d], self.dropout);
        if let Some(m) = mask2(&drop_ffn) {
            f *= &m;
        }
        x1 += &f;
        let y = x1.into_shape_with_order(shape).expect("standard layout");
        (y, TransformerCache { ln1, attn, ln2, h2, u, drop_attn, drop_ffn, shape })
    }

    pub fn backward(&mut self, cache: TransformerCache<A>, dy: Array3<A>) -> Array3<A> {
        let TransformerCache { ln1, attn, ln2, h2, u, drop_attn, drop_ffn, shape } = cache;
        let (b, t, d) = shape;
        let dy = dy.into_shape_with_order((b * t, d)).expect("standard layout");
        let mut df = dy.clone();
        if let Some(m) = mask2(&drop_ffn) {
            df *= &m;
        }
        let dg = self.ff2.backward(u.mapv(gelu).view(), df.view());
        drop(df);
        let du = dg * &u.mapv(gelu_grad);
        drop(u);
        let dh2 = self.ff1.backward(h2.view(), du.view());
        drop(h2);
        let mut dx = dy;
        dx += &self.ln2.backward(&ln2, dh2.view());
        let mut da = dx.clone();
        if let Some(m) = mask2(&drop_attn) {
            da *= &m;
        }
        let da = da.into_shape_with_order((b, t, d)).expect("standard layout");
        let (dh, _) = self.attn.backward(attn, da);
        let dh = dh.into_shape_with_order((b * t, d)).expect("standard layout");
        dx += &self.ln1.backward(&ln1, dh.view());
        dx.into_shape_with_order(shape).expect("standard layout")
    }
}

/// Pre-norm cross-attention with a residual onto the key/value (audio) stream.
///
/// Query and key/value sequences must have equal length so the attended output
/// can be added back onto the key/value input.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer<A> {
    pub ln_query: LayerNorm<A>,
    pub ln_kv: LayerNorm<A>,
    pub attn: MultiHeadAttention<A>,
    dropout: f64,
}

impl_parameterized!(CrossAttentionLayer { ln_query, ln_kv, attn });

pub struct CrossAttentionCache<A> {
    ln_query: LayerNormCache<A>,
    ln_kv: LayerNormCache<A>,
    attn: AttentionCache<A>,
    drop: Option<ArrayD<A>>,
    q_shape: (usize, usize, usize),
    kv_shape: (usize, usize, usize),
}

impl<A: Real> CrossAttentionLayer<A> {
    pub fn new(dim: usize, heads: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_query: LayerNorm::new(dim),
            ln_kv: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            dropout,
        }
    }

    /// `query` is `[bq, t, dim]`, `kv` is `[bq * rep, t, dim]`.
    pub fn forward(
        &self,
        query: ArrayView3<A>,
        kv: Array3<A>,
        ctx: &mut Ctx,
    ) -> (Array3<A>, CrossAttentionCache<A>) {
        let q_shape = query.dim();
        let kv_shape = kv.dim();
        assert_eq!(q_shape.1, kv_shape.1, "cross-attention needs equal query and key lengths");
        let (bq, tq, d) = q_shape;
        let (bk, tk, _) = kv_shape;
        let q2 = query.as_standard_layout();
        let q2 = q2.view().into_shape_with_order((bq * tq, d)).expect("standard layout");
        let (qn, ln_query) = self.ln_query.forward(q2);
        let mut kv2 = kv.into_shape_with_order((bk * tk, d)).expect("standard layout");
        let (kn, ln_kv) = self.ln_kv.forward(kv2.view());
        let (a, attn) = self.attn.forward_cross(
            qn.into_shape_with_order(q_shape).expect("shape"),
            kn.into_shape_with_order(kv_shape).expect("shape"),
        );
        let mut a = a.into_shape_with_order((bk * tk, d)).expect("standard layout");
        let drop = ctx.dropout_mask::<A>(&[bk * tk, d], self.dropout);
        if let Some(m) = mask2(&drop) {
            a *= &m;
        }
        kv2 += &a;
        let y = kv2.into_shape_with_order(kv_shape).expect("standard layout");
        (y, CrossAttentionCache { ln_query, ln_kv, attn, drop, q_shape, kv_shape })
    }

    /// Returns `(d_query, d_kv)`.
    pub fn backward(&mut self, cache: CrossAttentionCache<A>, dy: Array3<A>) -> (Array3<A>, Array3<A>) {
        let CrossAttentionCache { ln_query, ln_kv, attn, drop, q_shape, kv_shape } = cache;
        let (bq, tq, d) = q_shape;
        let (bk, tk, _) = kv_shape;
        let dy = dy.into_shape_with_order((bk * tk, d)).expect("standard layout");
        let mut da = dy.clone();
        if let Some(m) = mask2(&drop) {
            da *= &m;
        }
        let (dqn, dkn) =
            self.attn.backward(attn, da.into_shape_with_order(kv_shape).expect("shape"));
        let dkn = dkn.expect("cross-attention returns key/value gradient");
        let dqn = dqn.into_shape_with_order((bq * tq, d)).expect("standard layout");
        let dkn = dkn.into_shape_with_order((bk * tk, d)).expect("standard layout");
        let dq = self.ln_query.backward(&ln_query, dqn.view());
        let mut dkv = dy;
        dkv += &self.ln_kv.backward(&ln_kv, dkn.view());
        (
            dq.into_shape_with_order(q_shape).expect("shape"),
            dkv.into_shape_with_order(kv_shape).expect("shape"),
        )
    }
}

/// Fixed sinusoidal encoding `[len, dim]`: even columns sine, odd columns cosine.
pub fn sinusoidal_positions<A: Real>(len: usize, dim: usize) -> Array2<A> {
    Array2::from_shape_fn((len, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        cast(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use rand::SeedableRng;

    fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Param::<f64>::uniform(&[shape.0, shape.1, shape.2], 1.0, &mut rng);
        p.value.into_dimensionality().unwrap()
    }

    fn total_grad_check<F>(layer_loss: F, x: &Array3<f64>, dx: &Array3<f64>)
    where
        F: Fn(&Array3<f64>) -> f64,
    {
        let h = 1e-6;
        for (idx, &g) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (layer_loss(&xp) - layer_loss(&xm)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "idx {idx:?}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn transformer_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = TransformerLayer::<f64>::new(4, 2, 8, 0.0, &mut rng);
        let x = rand3((2, 3, 4), 5);
        let w = rand3((2, 3, 4), 6);
        let (_, cache) = layer.forward(x.clone(), &mut Ctx::eval());
        let dx = layer.backward(cache, w.clone());
        let probe = layer.clone();
        total_grad_check(|x| (probe.forward(x.clone(), &mut Ctx::eval()).0 * &w).sum(), &x, &dx);
    }

    #[test]
    fn cross_attention_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut layer = CrossAttentionLayer::<f64>::new(4, 2, 0.0, &mut rng);
        let q = rand3((2, 3, 4), 7);
        let kv = rand3((4, 3, 4), 8);
        let w = rand3((4, 3, 4), 9);
        let (_, cache) = layer.forward(q.view(), kv.clone(), &mut Ctx::eval());
        let (dq, dkv) = layer.backward(cache, w.clone());
        let probe = layer.clone();
        total_grad_check(
            |kv| (probe.forward(q.view(), kv.clone(), &mut Ctx::eval()).0 * &w).sum(),
            &kv,
            &dkv,
        );
        total_grad_check(
            |q| (probe.forward(q.view(), kv.clone(), &mut Ctx::eval()).0 * &w).sum(),
            &q,
            &dq,
        );
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::<f64>::new(4, 2, &mut rng);
        let (_, cache) = mha.forward_self(rand3((3, 5, 4), 2));
        for row in cache.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sinusoid_first_row_alternates_zero_one() {
        let pe = sinusoidal_positions::<f64>(3, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
