use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;

use super::SeparatorConfig;
use crate::error::{invalid, Result};
use crate::nn::{
    impl_parameterized, sinusoidal_positions, CrossAttentionCache, CrossAttentionLayer, Ctx,
    Real, TransformerCache, TransformerLayer,
};

/// `a.permuted_axes(axes)` copied into standard layout.
pub(crate) fn permute4<A: Real>(a: Array4<A>, axes: [usize; 4]) -> Array4<A> {
    let p = a.permuted_axes(axes);
    if p.is_standard_layout() {
        p
    } else {
        p.as_standard_layout().into_owned()
    }
}

fn permute3<A: Real>(a: ArrayView3<A>, axes: [usize; 3]) -> Array3<A> {
    a.permuted_axes(axes).as_standard_layout().into_owned()
}

fn add_positions<A: Real>(x: &mut Array3<A>, pe: &Array2<A>) {
    for mut seq in x.outer_iter_mut() {
        seq += pe;
    }
}

/// One separation block: local content attention over each chunk, visually
/// guided enhancement across chunks, global content attention across chunks,
/// then speaker-wise audio and audio-visual interaction.
#[derive(Clone, Debug)]
pub struct SeparatorBlock<A> {
    pub lca: Vec<TransformerLayer<A>>,
    pub gav: Option<CrossAttentionLayer<A>>,
    pub gca: Vec<TransformerLayer<A>>,
    pub sai: Option<TransformerLayer<A>>,
    pub savi: Option<CrossAttentionLayer<A>>,
}

impl_parameterized!(SeparatorBlock { lca, gav, gca, sai, savi });

pub struct BlockCache<A> {
    lca: Vec<TransformerCache<A>>,
    gav: Option<CrossAttentionCache<A>>,
    gca: Vec<TransformerCache<A>>,
    sai: Option<TransformerCache<A>>,
    savi: Option<CrossAttentionCache<A>>,
}

impl<A: Real> SeparatorBlock<A> {
    pub fn new(cfg: &SeparatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let layer = |rng: &mut ChaCha8Rng| {
            TransformerLayer::new(cfg.dim, cfg.heads, cfg.ffn_width, cfg.dropout, rng)
        };
        let cross = |rng: &mut ChaCha8Rng| CrossAttentionLayer::new(cfg.dim, cfg.heads, cfg.dropout, rng);
        let lca = (0..cfg.layers).map(|_| layer(rng)).collect();
        let gav = cfg.gav_enabled.then(|| cross(rng));
        let gca = (0..cfg.layers).map(|_| layer(rng)).collect();
        let sai = cfg.sai_enabled.then(|| layer(rng));
        let savi = cfg.savi_enabled.then(|| cross(rng));
        Self { lca, gav, gca, sai, savi }
    }

    /// Self-attention along the chunk-length axis, independently per (stream, chunk).
    pub fn lca(&self, a: Array4<A>, ctx: &mut Ctx) -> (Array4<A>, Vec<TransformerCache<A>>) {
        let (n, s, l, d) = a.dim();
        let mut x = a.into_shape_with_order((n * s, l, d)).expect("standard layout");
        add_positions(&mut x, &sinusoidal_positions(l, d));
        let mut caches = Vec::with_capacity(self.lca.len());
        for layer in &self.lca {
            let (y, c) = layer.forward(x, ctx);
            x = y;
            caches.push(c);
        }
        (x.into_shape_with_order((n, s, l, d)).expect("standard layout"), caches)
    }

    fn lca_backward(&mut self, caches: Vec<TransformerCache<A>>, da: Array4<A>) -> Array4<A> {
        let shape = da.dim();
        let (n, s, l, d) = shape;
        let mut dx = da.into_shape_with_order((n * s, l, d)).expect("standard layout");
        for (layer, c) in self.lca.iter_mut().zip(caches).rev() {
            dx = layer.backward(c, dx);
        }
        dx.into_shape_with_order(shape).expect("standard layout")
    }

    /// Self-attention along the chunk axis, independently per (stream, position in chunk).
    pub fn gca(&self, a: Array4<A>, ctx: &mut Ctx) -> (Array4<A>, Vec<TransformerCache<A>>) {
        let (n, s, l, d) = a.dim();
        let mut x = permute4(a, [0, 2, 1, 3]).into_shape_with_order((n * l, s, d)).expect("standard");
        add_positions(&mut x, &sinusoidal_positions(s, d));
        let mut caches = Vec::with_capacity(self.gca.len());
        for layer in &self.gca {
            let (y, c) = layer.forward(x, ctx);
            x = y;
            caches.push(c);
        }
        let y = x.into_shape_with_order((n, l, s, d)).expect("standard layout");
        (permute4(y, [0, 2, 1, 3]), caches)
    }

    fn gca_backward(&mut self, caches: Vec<TransformerCache<A>>, da: Array4<A>) -> Array4<A> {
        let (n, s, l, d) = da.dim();
        let mut dx = permute4(da, [0, 2, 1, 3]).into_shape_with_order((n * l, s, d)).expect("standard");
        for (layer, c) in self.gca.iter_mut().zip(caches).rev() {
            dx = layer.backward(c, dx);
        }
        permute4(dx.into_shape_with_order((n, l, s, d)).expect("standard"), [0, 2, 1, 3])
    }

    /// Visually guided enhancement of the first `P` streams: for every
    /// (speaker, position-in-chunk) slice, the speaker's `S` visual frames query
    /// the `S` audio frames at that position. Streams `P..` are not touched.
    pub fn gav(
        &self,
        mut a: Array4<A>,
        vis: &Array3<A>,
        ctx: &mut Ctx,
    ) -> Result<(Array4<A>, Option<CrossAttentionCache<A>>)> {
        let (n, s, l, d) = a.dim();
        let p = vis.shape()[0];
        if p > n {
            return Err(invalid!("{p} visual cues for {n} streams"));
        }
        let Some(layer) = &self.gav else { return Ok((a, None)) };
        if p == 0 {
            return Ok((a, None));
        }
        let top = permute4(a.slice(s![..p, .., .., ..]).to_owned(), [0, 2, 1, 3]);
        let top = top.into_shape_with_order((p * l, s, d)).expect("standard");
        let (y, cache) = layer.forward(vis.view(), top, ctx);
        let y = permute4(y.into_shape_with_order((p, l, s, d)).expect("standard"), [0, 2, 1, 3]);
        a.slice_mut(s![..p, .., .., ..]).assign(&y);
        Ok((a, Some(cache)))
    }

    fn gav_backward(
        &mut self,
        cache: Option<CrossAttentionCache<A>>,
        mut da: Array4<A>,
        d_vis: &mut Array3<A>,
    ) -> Array4<A> {
        let (Some(layer), Some(cache)) = (&mut self.gav, cache) else { return da };
        let (_, s, l, d) = da.dim();
        let p = d_vis.shape()[0];
        let top = permute4(da.slice(s![..p, .., .., ..]).to_owned(), [0, 2, 1, 3]);
        let top = top.into_shape_with_order((p * l, s, d)).expect("standard");
        let (dq, dkv) = layer.backward(cache, top);
        *d_vis += &dq;
        let dkv = permute4(dkv.into_shape_with_order((p, l, s, d)).expect("standard"), [0, 2, 1, 3]);
        da.slice_mut(s![..p, .., .., ..]).assign(&dkv);
        da
    }

    /// Self-attention across speakers, independently per (chunk, position); no
    /// positional encoding on the speaker axis.
    pub fn sai(&self, a: Array4<A>, ctx: &mut Ctx) -> (Array4<A>, Option<TransformerCache<A>>) {
        let Some(layer) = &self.sai else { return (a, None) };
        let (n, s, l, d) = a.dim();
        let x = permute4(a, [1, 2, 0, 3]).into_shape_with_order((s * l, n, d)).expect("standard");
        let (y, cache) = layer.forward(x, ctx);
        let y = y.into_shape_with_order((s, l, n, d)).expect("standard");
        (permute4(y, [2, 0, 1, 3]), Some(cache))
    }

    fn sai_backward(&mut self, cache: Option<TransformerCache<A>>, da: Array4<A>) -> Array4<A> {
        let (Some(layer), Some(cache)) = (&mut self.sai, cache) else { return da };
        let (n, s, l, d) = da.dim();
        let dx = permute4(da, [1, 2, 0, 3]).into_shape_with_order((s * l, n, d)).expect("standard");
        let dx = layer.backward(cache, dx);
        permute4(dx.into_shape_with_order((s, l, n, d)).expect("standard"), [2, 0, 1, 3])
    }

    /// Speaker-wise audio-visual cross-attention on the first `P` streams: at
    /// every (chunk, position) the `P` visual frames query the `P` guided audio
    /// frames. Streams `P..` are not touched.
    pub fn savi(
        &self,
        mut a: Array4<A>,
        vis: &Array3<A>,
        ctx: &mut Ctx,
    ) -> Result<(Array4<A>, Option<CrossAttentionCache<A>>)> {
        let (n, s, l, d) = a.dim();
        let p = vis.shape()[0];
        if p > n {
            return Err(invalid!("{p} visual cues for {n} streams"));
        }
        let Some(layer) = &self.savi else { return Ok((a, None)) };
        if p == 0 {
            return Ok((a, None));
        }
        let top = permute4(a.slice(s![..p, .., .., ..]).to_owned(), [1, 2, 0, 3]);
        let top = top.into_shape_with_order((s * l, p, d)).expect("standard");
        let query = permute3(vis.view(), [1, 0, 2]);
        let (y, cache) = layer.forward(query.view(), top, ctx);
        let y = permute4(y.into_shape_with_order((s, l, p, d)).expect("standard"), [2, 0, 1, 3]);
        a.slice_mut(s![..p, .., .., ..]).assign(&y);
        Ok((a, Some(cache)))
    }

    fn savi_backward(
        &mut self,
        cache: Option<CrossAttentionCache<A>>,
        mut da: Array4<A>,
        d_vis: &mut Array3<A>,
    ) -> Array4<A> {
        let (Some(layer), Some(cache)) = (&mut self.savi, cache) else { return da };
        let (_, s, l, d) = da.dim();
        let p = d_vis.shape()[0];
        let top = permute4(da.slice(s![..p, .., .., ..]).to_owned(), [1, 2, 0, 3]);
        let top = top.into_shape_with_order((s * l, p, d)).expect("standard");
        let (dq, dkv) = layer.backward(cache, top);
        *d_vis += &permute3(dq.view(), [1, 0, 2]);
        let dkv = permute4(dkv.into_shape_with_order((s, l, p, d)).expect("standard"), [2, 0, 1, 3]);
        da.slice_mut(s![..p, .., .., ..]).assign(&dkv);
        da
    }

    pub fn forward(
        &self,
        a: Array4<A>,
        vis: &Array3<A>,
        ctx: &mut Ctx,
    ) -> Result<(Array4<A>, BlockCache<A>)> {
        let (a, lca) = self.lca(a, ctx);
        let (a, gav) = self.gav(a, vis, ctx)?;
        let (a, gca) = self.gca(a, ctx);
        let (a, sai) = self.sai(a, ctx);
        let (a, savi) = self.savi(a, vis, ctx)?;
        Ok((a, BlockCache { lca, gav, gca, sai, savi }))
    }

    /// Back-propagates through the block; visual gradients accumulate into `d_vis`.
    pub fn backward(&mut self, cache: BlockCache<A>, da: Array4<A>, d_vis: &mut Array3<A>) -> Array4<A> {
        let BlockCache { lca, gav, gca, sai, savi } = cache;
        let da = self.savi_backward(savi, da, d_vis);
        let da = self.sai_backward(sai, da);
        let da = self.gca_backward(gca, da);
        let da = self.gav_backward(gav, da, d_vis);
        self.lca_backward(lca, da)
    }
}

/// Sum over every axis except the first: `[N, S, L, D] -> [N, D]`.
pub(crate) fn sum_over_chunks<A: Real>(a: &Array4<A>) -> Array2<A> {
    a.sum_axis(Axis(1)).sum_axis(Axis(1))
}
