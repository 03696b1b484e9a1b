//! Mask estimation network.
//!
//! The mixture's chunked encoder features are replicated into `N` streams, one
//! per speaker, and each stream is offset by a learned speaker-slot embedding so
//! that streams without a visual cue are not interchangeable copies of each
//! other. `B` [`SeparatorBlock`]s then refine the streams and an overlap-add
//! turns them into per-speaker masks.

mod block;
mod config;

pub use block::{BlockCache, SeparatorBlock};
pub use config::SeparatorConfig;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    chunk_count, chunk_frames, chunk_frames_adjoint, overlap_add_adjoint, overlap_add_frames,
    ChunkedFeatures, EncodedFeatures, MaskSet,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{cast, impl_parameterized, Ctx, Linear, Param, Real};
use crate::visual::{align_to_chunks, VisualFeatures};

#[derive(Clone, Debug)]
pub struct Separator<A> {
    config: SeparatorConfig,
    /// Speaker-slot embeddings `[max_speakers, D]`.
    pub slots: Param<A>,
    pub visual_proj: Option<Linear<A>>,
    pub blocks: Vec<SeparatorBlock<A>>,
}

impl_parameterized!(Separator { slots, visual_proj, blocks });

pub struct SeparatorCache<A> {
    blocks: Vec<BlockCache<A>>,
    vis_raw: Option<Array2<A>>,
    p: usize,
    chunks: usize,
    frames: usize,
    pre_relu: Option<Array3<A>>,
}

impl<A: Real> Separator<A> {
    pub fn new(config: &SeparatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let slots = Param::uniform(&[config.max_speakers, config.dim], 1.0, rng);
        let rows = slots.value.view().into_dimensionality::<Ix2>().expect("2-d");
        for i in 0..rows.nrows() {
            for j in 0..i {
                assert_ne!(rows.row(i), rows.row(j), "speaker-slot rows must be distinct");
            }
        }
        let visual_proj = (config.visual_dim != config.dim)
            .then(|| Linear::new(config.visual_dim, config.dim, true, rng));
        let blocks = (0..config.blocks).map(|_| SeparatorBlock::new(config, rng)).collect();
        Self { config: config.clone(), slots, visual_proj, blocks }
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    fn check_streams(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.max_speakers {
            return Err(Error::Config(format!(
                "speaker count {n} outside 1..={}",
                self.config.max_speakers
            )));
        }
        Ok(())
    }

    fn check_visuals(&self, v: &VisualFeatures, n: usize) -> Result<()> {
        if v.speakers() > n {
            return Err(invalid!("{} visual cues for {n} speakers", v.speakers()));
        }
        if v.present().len() != n {
            return Err(invalid!("visual presence flags cover {} speakers, expected {n}", v.present().len()));
        }
        if v.speakers() > 0 && v.dim() != self.config.visual_dim {
            return Err(invalid!(
                "visual feature width {} does not match configured {}",
                v.dim(),
                self.config.visual_dim
            ));
        }
        Ok(())
    }

    /// Replicates `[1, S, L, D]` mixture chunks into `n` streams, adding slot `i` to stream `i`.
    pub fn expand_streams(&self, mix: &ChunkedFeatures<A>, n: usize) -> Result<ChunkedFeatures<A>> {
        self.check_streams(n)?;
        if mix.streams() != 1 {
            return Err(invalid!("expected a single mixture stream, found {}", mix.streams()));
        }
        Ok(ChunkedFeatures {
            data: self.expand(mix.data.view().index_axis_move(Axis(0), 0).to_owned(), n),
            chunk_hop: mix.chunk_hop,
            valid_length: mix.valid_length,
        })
    }

    fn expand(&self, mix: ndarray::Array3<A>, n: usize) -> Array4<A> {
        let (s, l, d) = mix.dim();
        let slots = self.slots.value.view().into_dimensionality::<Ix2>().expect("2-d");
        let mut out = Array4::zeros((n, s, l, d));
        for (i, mut stream) in out.outer_iter_mut().enumerate() {
            stream.assign(&mix);
            stream += &slots.row(i);
        }
        out
    }

    /// Time-aligns the visual cues to `chunks` frames and maps them to width `D`.
    pub fn project_visuals(&self, v: &VisualFeatures, chunks: usize) -> Array3<A> {
        let (vis, _) = self.visual_forward(v, chunks);
        vis
    }

    fn visual_forward(&self, v: &VisualFeatures, chunks: usize) -> (Array3<A>, Option<Array2<A>>) {
        let p = v.speakers();
        let d = self.config.dim;
        if p == 0 {
            return (Array3::zeros((0, chunks, d)), None);
        }
        let aligned = align_to_chunks(v, chunks).mapv(|x| cast::<A>(x as f64));
        match &self.visual_proj {
            None => (aligned, None),
            Some(proj) => {
                let raw = aligned.into_shape_with_order((p * chunks, v.dim())).expect("standard");
                let out = proj.forward(raw.view());
                (out.into_shape_with_order((p, chunks, d)).expect("standard"), Some(raw))
            }
        }
    }

    /// Mask estimation from encoder output `[T_a, D]`; returns masks `[N, T_a, D]`.
    pub fn forward(
        &self,
        enc: ArrayView2<A>,
        v: &VisualFeatures,
        n: usize,
        ctx: &mut Ctx,
    ) -> Result<(Array3<A>, SeparatorCache<A>)> {
        self.check_streams(n)?;
        self.check_visuals(v, n)?;
        let frames = enc.nrows();
        let chunked = chunk_frames(enc.insert_axis(Axis(0)), self.config.chunk_size)?;
        let chunks = chunk_count(frames, self.config.chunk_size);
        let mut a = self.expand(chunked.index_axis_move(Axis(0), 0), n);
        let (vis, vis_raw) = self.visual_forward(v, chunks);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(a, &vis, ctx)?;
            a = y;
            caches.push(c);
        }
        let mut mask = overlap_add_frames(a.view(), frames);
        let pre_relu = if self.config.mask_relu {
            let pre = mask.clone();
            mask.mapv_inplace(|x| x.max(A::zero()));
            Some(pre)
        } else {
            None
        };
        Ok((mask, SeparatorCache { blocks: caches, vis_raw, p: v.speakers(), chunks, frames, pre_relu }))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the encoder output.
    pub fn backward(&mut self, cache: SeparatorCache<A>, d_mask: Array3<A>) -> Array2<A> {
        let SeparatorCache { blocks, vis_raw, p, chunks, frames, pre_relu } = cache;
        let mut d_mask = d_mask;
        if let Some(pre) = pre_relu {
            d_mask.zip_mut_with(&pre, |g, &x| {
                if x <= A::zero() {
                    *g = A::zero();
                }
            });
        }
        let d = self.config.dim;
        let chunk = self.config.chunk_size;
        let mut da = overlap_add_adjoint(d_mask.view(), chunks, chunk);
        let mut d_vis = Array3::<A>::zeros((p, chunks, d));
        for (block, c) in self.blocks.iter_mut().zip(blocks).rev() {
            da = block.backward(c, da, &mut d_vis);
        }
        {
            let mut gs = self.slots.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
            let per_stream = block::sum_over_chunks(&da);
            let n = per_stream.nrows();
            let mut rows = gs.slice_mut(s![..n, ..]);
            rows += &per_stream;
        }
        if let (Some(proj), Some(raw)) = (&mut self.visual_proj, vis_raw) {
            let dv = d_vis.into_shape_with_order((p * chunks, d)).expect("standard");
            proj.backward(raw.view(), dv.view());
        }
        let d_mix = da.sum_axis(Axis(0)).insert_axis(Axis(0));
        chunk_frames_adjoint(d_mix.view(), frames).index_axis_move(Axis(0), 0)
    }

    /// Inference-mode masks for `n` speakers.
    pub fn masks(&self, enc: &EncodedFeatures<A>, v: &VisualFeatures, n: usize) -> Result<MaskSet<A>> {
        let (data, _) = self.forward(enc.data.view(), v, n, &mut Ctx::eval())?;
        Ok(MaskSet { data })
    }
}
