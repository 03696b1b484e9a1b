//! Learned time-domain encoder/decoder, chunking and overlap-add.
//!
//! The encoder is a bias-free strided convolution (kernel `K`, stride `K/2`)
//! implemented as framing followed by a matrix product; the decoder is its
//! transposed counterpart. Chunking splits the encoded time axis into windows of
//! `L` frames with hop `L/2`; overlap-add is its exact inverse on valid frames.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{invalid, Result};
use crate::nn::{cast, impl_parameterized, Param, Real};

/// Number of encoder frames for `t_x` samples: `ceil(2 * t_x / kernel)`.
pub fn frame_count(t_x: usize, kernel: usize) -> usize {
    (2 * t_x).div_ceil(kernel)
}

/// Number of chunks of length `chunk` (hop `chunk/2`) after right-padding `t_a` frames.
pub fn chunk_count(t_a: usize, chunk: usize) -> usize {
    let hop = chunk / 2;
    t_a.div_ceil(hop) - 1
}

/// Encoder output `[T_a, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeatures<A> {
    pub data: Array2<A>,
    pub frame_stride: usize,
}

/// Chunked features `[N, S, L, D]`; `valid_length` is `T_a` before tail padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFeatures<A> {
    pub data: Array4<A>,
    pub chunk_hop: usize,
    pub valid_length: usize,
}

impl<A: Real> ChunkedFeatures<A> {
    pub fn streams(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn chunks(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn chunk_len(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-stream masks `[N, T_a, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<A> {
    pub data: Array3<A>,
}

fn check_even(name: &str, v: usize) -> Result<()> {
    if v == 0 || v % 2 != 0 {
        return Err(invalid!("{name} must be a positive even number, got {v}"));
    }
    Ok(())
}

/// Splits `[N, T, D]` into `[N, S, L, D]` windows with hop `L/2`, zero-padding the tail.
pub fn chunk_frames<A: Real>(x: ArrayView3<A>, chunk: usize) -> Result<Array4<A>> {
    check_even("chunk length", chunk)?;
    let (n, t, d) = x.dim();
    if chunk > t {
        return Err(invalid!("chunk length {chunk} exceeds {t} encoded frames"));
    }
    let hop = chunk / 2;
    let s_count = chunk_count(t, chunk);
    let mut out = Array4::zeros((n, s_count, chunk, d));
    for s in 0..s_count {
        let start = s * hop;
        let end = (start + chunk).min(t);
        out.slice_mut(s![.., s, ..end - start, ..]).assign(&x.slice(s![.., start..end, ..]));
    }
    Ok(out)
}

/// Adjoint of [`chunk_frames`]: scatters window gradients back onto `t` frames.
pub fn chunk_frames_adjoint<A: Real>(g: ArrayView4<A>, t: usize) -> Array3<A> {
    let (n, s_count, chunk, d) = g.dim();
    let hop = chunk / 2;
    let mut out = Array3::zeros((n, t, d));
    for s in 0..s_count {
        let start = s * hop;
        let end = (start + chunk).min(t);
        if end > start {
            let mut dst = out.slice_mut(s![.., start..end, ..]);
            dst += &g.slice(s![.., s, ..end - start, ..]);
        }
    }
    out
}

/// Overlap count at padded frame `t` for `s_count` windows of hop `hop`.
fn coverage(t: usize, hop: usize, s_count: usize) -> usize {
    let seg = t / hop;
    usize::from(seg < s_count) + usize::from(seg >= 1)
}

/// Averages overlapping windows `[N, S, L, D]` back to `[N, t, D]`.
pub fn overlap_add_frames<A: Real>(c: ArrayView4<A>, t: usize) -> Array3<A> {
    let (n, s_count, chunk, d) = c.dim();
    let hop = chunk / 2;
    let padded = (s_count + 1) * hop;
    let mut acc = Array3::<A>::zeros((n, padded, d));
    for s in 0..s_count {
        let mut dst = acc.slice_mut(s![.., s * hop..s * hop + chunk, ..]);
        dst += &c.slice(s![.., s, .., ..]);
    }
    for tt in 0..padded {
        if coverage(tt, hop, s_count) == 2 {
            acc.slice_mut(s![.., tt, ..]).mapv_inplace(|v| v * cast::<A>(0.5));
        }
    }
    acc.slice_move(s![.., ..t, ..])
}

/// Adjoint of [`overlap_add_frames`].
pub fn overlap_add_adjoint<A: Real>(g: ArrayView3<A>, s_count: usize, chunk: usize) -> Array4<A> {
    let (n, t, d) = g.dim();
    let hop = chunk / 2;
    let mut out = Array4::zeros((n, s_count, chunk, d));
    for s in 0..s_count {
        for j in 0..chunk {
            let tt = s * hop + j;
            if tt >= t {
                break;
            }
            let w: A = if coverage(tt, hop, s_count) == 2 { cast(0.5) } else { A::one() };
            out.slice_mut(s![.., s, j, ..]).assign(&g.slice(s![.., tt, ..]).mapv(|v| v * w));
        }
    }
    out
}

/// Chunks encoder output into a single stream `[1, S, L, D]`.
pub fn chunk<A: Real>(f: &EncodedFeatures<A>, chunk_len: usize) -> Result<ChunkedFeatures<A>> {
    if f.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("encoded features contain non-finite values"));
    }
    let x = f.data.view().insert_axis(Axis(0));
    Ok(ChunkedFeatures {
        data: chunk_frames(x, chunk_len)?,
        chunk_hop: chunk_len / 2,
        valid_length: f.data.nrows(),
    })
}

pub fn overlap_add<A: Real>(c: &ChunkedFeatures<A>) -> Result<Array3<A>> {
    let (_, s_count, chunk_len, _) = c.data.dim();
    if chunk_len != 2 * c.chunk_hop {
        return Err(invalid!("chunk hop {} is not half of chunk length {chunk_len}", c.chunk_hop));
    }
    if c.valid_length > (s_count + 1) * c.chunk_hop {
        return Err(invalid!("valid length {} exceeds chunk coverage", c.valid_length));
    }
    Ok(overlap_add_frames(c.data.view(), c.valid_length))
}

/// `out[n] = enc ⊙ mask[n]` for every stream.
pub fn apply_mask<A: Real>(enc: &EncodedFeatures<A>, m: &MaskSet<A>) -> Result<Array3<A>> {
    let (_, t, d) = m.data.dim();
    if enc.data.dim() != (t, d) {
        return Err(invalid!(
            "mask frames {:?} do not match encoder output {:?}",
            (t, d),
            enc.data.dim()
        ));
    }
    Ok(&m.data * &enc.data.view().insert_axis(Axis(0)))
}

/// Bias-free strided convolution, weight `[K, D]`.
#[derive(Clone, Debug)]
pub struct Encoder<A> {
    pub weight: Param<A>,
}

impl_parameterized!(Encoder { weight });

impl<A: Real> Encoder<A> {
    pub fn new(kernel: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel >= 2 && kernel % 2 == 0, "kernel must be even");
        Self { weight: Param::uniform_fan_in(&[kernel, dim], kernel, rng) }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, A> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    /// Frames `[T_a, K]` of the right-zero-padded signal, stride `K/2`.
    pub fn frames(&self, x: &[A]) -> Array2<A> {
        let k = self.kernel();
        let hop = k / 2;
        let t_a = frame_count(x.len(), k);
        Array2::from_shape_fn((t_a, k), |(t, j)| x.get(t * hop + j).copied().unwrap_or_else(A::zero))
    }

    /// Returns the encoded features and the frame matrix needed by [`Self::backward`].
    pub fn forward(&self, x: &[A]) -> (Array2<A>, Array2<A>) {
        let frames = self.frames(x);
        (frames.dot(&self.w()), frames)
    }

    pub fn backward(&mut self, frames: &Array2<A>, d_enc: ArrayView2<A>) {
        let g = frames.t().dot(&d_enc);
        self.weight.grad += &g.into_dyn();
    }

    pub fn encode(&self, w: &Waveform) -> Result<EncodedFeatures<A>> {
        if w.samples().iter().any(|v| !v.is_finite()) {
            return Err(invalid!("waveform contains non-finite samples"));
        }
        let x: Vec<A> = w.samples().iter().map(|&v| cast(v)).collect();
        Ok(EncodedFeatures { data: self.forward(&x).0, frame_stride: self.kernel() / 2 })
    }
}

/// Transposed counterpart of [`Encoder`], weight `[D, K]`.
#[derive(Clone, Debug)]
pub struct Decoder<A> {
    pub weight: Param<A>,
}

impl_parameterized!(Decoder { weight });

impl<A: Real> Decoder<A> {
    pub fn new(kernel: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel >= 2 && kernel % 2 == 0, "kernel must be even");
        Self { weight: Param::uniform_fan_in(&[dim, kernel], dim, rng) }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, A> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    /// `[N, T_a, D]` features to `[N, t_x]` samples.
    pub fn forward(&self, a: ArrayView3<A>, t_x: usize) -> Array2<A> {
        let (n, t_a, _) = a.dim();
        let k = self.kernel();
        let hop = k / 2;
        let mut out = Array2::zeros((n, t_x));
        for (stream, mut y) in a.outer_iter().zip(out.outer_iter_mut()) {
            let frames = stream.dot(&self.w());
            for t in 0..t_a {
                for j in 0..k {
                    let idx = t * hop + j;
                    if idx < t_x {
                        y[idx] += frames[[t, j]];
                    }
                }
            }
        }
        out
    }

    /// Accumulates the weight gradient and returns `d a`.
    pub fn backward(&mut self, a: ArrayView3<A>, dy: ArrayView2<A>) -> Array3<A> {
        let (n, t_a, d) = a.dim();
        let t_x = dy.ncols();
        let k = self.kernel();
        let hop = k / 2;
        let mut da = Array3::zeros((n, t_a, d));
        let mut gw = Array2::<A>::zeros((d, k));
        for ((stream, dys), mut das) in a.outer_iter().zip(dy.outer_iter()).zip(da.outer_iter_mut()) {
            let dframes = Array2::from_shape_fn((t_a, k), |(t, j)| {
                let idx = t * hop + j;
                if idx < t_x {
                    dys[idx]
                } else {
                    A::zero()
                }
            });
            gw += &stream.t().dot(&dframes);
            das.assign(&dframes.dot(&self.w().t()));
        }
        self.weight.grad += &gw.into_dyn();
        da
    }

    pub fn decode(&self, a: ArrayView3<A>, t_x: usize, sample_rate: u32) -> Result<Vec<Waveform>> {
        let y = self.forward(a, t_x);
        y.outer_iter()
            .map(|row| Waveform::new(row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(), sample_rate))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(96_000, 16), 12_000);
        assert_eq!(frame_count(16, 16), 2);
        assert_eq!(frame_count(17, 16), 3);
        assert_eq!(chunk_count(12_000, 160), 149);
        assert_eq!(chunk_count(12, 4), 5);
    }

    #[test]
    fn encode_shape_and_zero_input() {
        let enc = Encoder::<f64>::new(16, 4, &mut rng());
        let w = Waveform::zeros(16, 16000);
        let f = enc.encode(&w).unwrap();
        assert_eq!(f.data.dim(), (2, 4));
        assert!(f.data.iter().all(|&v| v == 0.0));
        assert_eq!(f.frame_stride, 8);
    }

    #[test]
    fn encode_is_linear() {
        let enc = Encoder::<f64>::new(8, 3, &mut rng());
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 1.1).cos()).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = enc.forward(&ab).0;
        let rhs = enc.forward(&a).0 + enc.forward(&b).0;
        assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn chunk_rejects_odd_or_oversized_windows() {
        let f = EncodedFeatures { data: Array2::<f64>::zeros((6, 2)), frame_stride: 8 };
        assert!(chunk(&f, 3).is_err());
        assert!(chunk(&f, 8).is_err());
        let mut bad = f.clone();
        bad.data[[0, 0]] = f64::INFINITY;
        assert!(chunk(&bad, 4).is_err());
    }

    #[test]
    fn chunk_pads_tail_and_round_trips() {
        let data = Array2::from_shape_fn((11, 3), |(t, d)| (t * 3 + d) as f64);
        let f = EncodedFeatures { data: data.clone(), frame_stride: 8 };
        let c = chunk(&f, 4).unwrap();
        assert_eq!(c.data.dim(), (1, 5, 4, 3));
        // last window: frames 8, 9, 10 and one zero pad frame
        assert_eq!(c.data[[0, 4, 3, 0]], 0.0);
        assert_eq!(c.data[[0, 4, 2, 0]], 30.0);
        let back = overlap_add(&c).unwrap();
        assert_eq!(back.index_axis(Axis(0), 0), data);
    }

    #[test]
    fn overlap_add_of_ones_is_ones() {
        let c = ChunkedFeatures { data: Array4::<f64>::ones((2, 4, 6, 3)), chunk_hop: 3, valid_length: 15 };
        let y = overlap_add(&c).unwrap();
        assert_eq!(y.dim(), (2, 15, 3));
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn apply_mask_examples() {
        let enc = EncodedFeatures { data: array![[1.0, 2.0]], frame_stride: 8 };
        let m = MaskSet { data: array![[[3.0, 4.0]]] };
        assert_eq!(apply_mask(&enc, &m).unwrap(), array![[[3.0, 8.0]]]);
        let ones = MaskSet { data: Array3::ones((3, 1, 2)) };
        let out = apply_mask(&enc, &ones).unwrap();
        for s in out.outer_iter() {
            assert_eq!(s, enc.data);
        }
        let zeros = MaskSet { data: Array3::zeros((2, 1, 2)) };
        assert!(apply_mask(&enc, &zeros).unwrap().iter().all(|&v| v == 0.0));
        let wrong = MaskSet { data: Array3::zeros((2, 2, 2)) };
        assert!(apply_mask(&enc, &wrong).is_err());
    }

    #[test]
    fn decode_length_count_and_zero() {
        let dec = Decoder::<f64>::new(16, 4, &mut rng());
        let a = Array3::<f64>::zeros((3, frame_count(100, 16), 4));
        let ws = dec.decode(a.view(), 100, 16000).unwrap();
        assert_eq!(ws.len(), 3);
        assert!(ws.iter().all(|w| w.len() == 100 && w.samples().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn decode_preserves_stream_order() {
        let dec = Decoder::<f64>::new(4, 2, &mut rng());
        let mut a = Array3::<f64>::zeros((3, 5, 2));
        a[[1, 2, 0]] = 1.0;
        let y = dec.forward(a.view(), 10);
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        assert!(y.row(1).iter().any(|&v| v != 0.0));
        assert!(y.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <C x, y> = <x, C* y> for chunking and overlap-add
        let x = Array3::from_shape_fn((2, 13, 3), |(n, t, d)| ((n * 31 + t * 7 + d) as f64).sin());
        let c = chunk_frames(x.view(), 4).unwrap();
        let y = Array4::from_shape_fn(c.raw_dim(), |(a, b, cc, d)| ((a + 2 * b + 3 * cc + 5 * d) as f64).cos());
        let lhs = (&c * &y).sum();
        let rhs = (&x * &chunk_frames_adjoint(y.view(), 13)).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let oa = overlap_add_frames(y.view(), 13);
        let lhs = (&oa * &x).sum();
        let rhs = (&y * &overlap_add_adjoint(x.view(), y.shape()[1], 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn decoder_backward_matches_inner_product() {
        let mut dec = Decoder::<f64>::new(4, 2, &mut rng());
        let a = Array3::from_shape_fn((2, 6, 2), |(n, t, d)| ((n + t * 3 + d) as f64).sin());
        let dy = Array2::from_shape_fn((2, 11), |(n, t)| ((n * 5 + t) as f64).cos());
        let da = dec.backward(a.view(), dy.view());
        // decoder is linear in `a`
        let lhs = (dec.forward(a.view(), 11) * &dy).sum();
        let rhs = (&a * &da).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
