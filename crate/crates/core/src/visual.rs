//! Visual cue handling: the VFEA feature container, synthetic lip-motion
//! stand-ins, missing-frame simulation and alignment to the audio chunk grid.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{invalid, Error, Result};

pub const VFEA_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEA_VERSION: u16 = 1;
pub const DEFAULT_FPS: f64 = 25.0;
const VFEA_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Per-frame lip features for the `P` speakers that have a visual cue.
///
/// `present` has one entry per speaker in the mixture (length `N`); the rows of
/// `data` follow the order of the `true` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    data: Array3<f32>,
    fps: f64,
    present: Vec<bool>,
}

impl VisualFeatures {
    pub fn new(data: Array3<f32>, fps: f64, present: Vec<bool>) -> Result<Self> {
        let p = present.iter().filter(|&&b| b).count();
        if data.shape()[0] != p {
            return Err(invalid!(
                "{} feature rows but {p} present flags",
                data.shape()[0]
            ));
        }
        if !(fps > 0.0) {
            return Err(invalid!("fps must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("visual features contain non-finite values".into()));
        }
        Ok(Self { data, fps, present })
    }

    /// Features for `n` speakers of which none has a cue.
    pub fn absent(n: usize, frames: usize, dim: usize, fps: f64) -> Self {
        Self { data: Array3::zeros((0, frames, dim)), fps, present: vec![false; n] }
    }

    /// Stacks single-speaker tracks; all must share frame count, width and fps.
    /// The result marks the first `tracks.len()` of `n` speakers as present.
    pub fn stack(tracks: &[VisualFeatures], n: usize) -> Result<Self> {
        if tracks.len() > n {
            return Err(invalid!("{} visual tracks for {n} speakers", tracks.len()));
        }
        let Some(first) = tracks.first() else {
            return Ok(Self::absent(n, 0, 0, DEFAULT_FPS));
        };
        let (t_v, d_v) = (first.frames(), first.dim());
        let mut views = Vec::with_capacity(tracks.len());
        for t in tracks {
            if t.speakers() != 1 || t.frames() != t_v || t.dim() != d_v {
                return Err(invalid!(
                    "visual tracks disagree: expected [1, {t_v}, {d_v}], found {:?}",
                    t.data.shape()
                ));
            }
            views.push(t.data.view());
        }
        let data = ndarray::concatenate(Axis(0), &views).expect("shapes checked");
        let present = (0..n).map(|i| i < tracks.len()).collect();
        Self::new(data, first.fps, present)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Number of speakers with a cue (`P`).
    pub fn speakers(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Reads a single-speaker VFEA file.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let track = decode_vfea(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let (t_v, d_v) = track.dim();
        let data = track.into_shape_with_order((1, t_v, d_v)).expect("contiguous");
        Self::new(data, DEFAULT_FPS, vec![true])
    }

    /// Writes speaker row `speaker` as a VFEA file.
    pub fn write(&self, speaker: usize, path: impl AsRef<Path>) -> Result<()> {
        if speaker >= self.speakers() {
            return Err(invalid!("speaker {speaker} out of range"));
        }
        let path = path.as_ref();
        let bytes = encode_vfea(self.data.index_axis(Axis(0), speaker));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn encode_vfea(track: ArrayView2<f32>) -> Vec<u8> {
    let (t_v, d_v) = track.dim();
    let mut out = Vec::with_capacity(VFEA_HEADER_LEN + 4 * t_v * d_v);
    out.extend_from_slice(VFEA_MAGIC);
    out.extend_from_slice(&VFEA_VERSION.to_le_bytes());
    out.extend_from_slice(&(t_v as u32).to_le_bytes());
    out.extend_from_slice(&(d_v as u32).to_le_bytes());
    for v in track.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vfea(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < VFEA_HEADER_LEN {
        return Err(Error::Format("truncated VFEA header".into()));
    }
    if &bytes[..4] != VFEA_MAGIC {
        return Err(Error::Format("bad VFEA magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VFEA_VERSION {
        return Err(Error::Format(format!("unsupported VFEA version {version}")));
    }
    let t_v = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d_v = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if d_v == 0 {
        return Err(Error::Format("VFEA feature width is zero".into()));
    }
    let payload = t_v
        .checked_mul(d_v)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("VFEA dimensions overflow".into()))?;
    let body = &bytes[VFEA_HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "VFEA payload is {} bytes, header declares {payload}",
            body.len()
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("VFEA payload contains non-finite values".into()));
    }
    Ok(Array2::from_shape_vec((t_v, d_v), values).expect("length checked"))
}

/// Number of video frames covering `samples` audio samples: `ceil(duration * fps)`.
pub fn video_frames(samples: usize, sample_rate: u32, fps: f64) -> usize {
    let exact = samples as f64 * fps / sample_rate as f64;
    (exact - 1e-9).ceil().max(0.0) as usize
}

/// Deterministic stand-in for a lip-motion extractor.
///
/// Each video frame is summarised by its log-compressed RMS energy and the
/// change from the previous frame; the pair is mapped to `dim` features by a
/// fixed random projection plus offset drawn from `seed`. A silent input gives
/// every frame the offset vector.
pub fn synthesize_toy_features(w: &Waveform, fps: f64, dim: usize, seed: u64) -> Result<VisualFeatures> {
    if !(fps > 0.0) {
        return Err(invalid!("fps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<[f32; 2]> =
        (0..dim).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let offset: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();

    let t_v = video_frames(w.len(), w.sample_rate(), fps);
    let hop = w.sample_rate() as f64 / fps;
    let x = w.samples();
    let mut prev = 0.0f64;
    let mut data = Array3::<f32>::zeros((1, t_v, dim));
    for f in 0..t_v {
        let start = (f as f64 * hop).round() as usize;
        let end = (((f + 1) as f64 * hop).round() as usize).min(x.len());
        let seg = if start < end { &x[start..end] } else { &[][..] };
        let rms = if seg.is_empty() {
            0.0
        } else {
            (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
        };
        let level = (50.0 * rms).ln_1p();
        let delta = level - prev;
        prev = level;
        for (j, (p, o)) in proj.iter().zip(&offset).enumerate() {
            data[[0, f, j]] = p[0] * level as f32 + p[1] * delta as f32 + o;
        }
    }
    VisualFeatures::new(data, fps, vec![true])
}

/// Frames to blank per visually-guided speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMaskPlan {
    pub rate: f64,
    pub seed: u64,
    pub indices: Vec<Vec<usize>>,
}

impl FrameMaskPlan {
    /// Uniform selection without replacement of `round(rate * frames)` frames per speaker.
    pub fn sample(rate: f64, seed: u64, speakers: usize, frames: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(invalid!("frame mask rate {rate} outside [0, 1]"));
        }
        let count = (rate * frames as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = (0..speakers)
            .map(|_| {
                let mut idx = rand::seq::index::sample(&mut rng, frames, count.min(frames)).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self { rate, seed, indices })
    }
}

/// Zeroes the planned frames; every other value is left untouched.
pub fn mask_frames(v: &VisualFeatures, plan: &FrameMaskPlan) -> Result<VisualFeatures> {
    if plan.indices.len() != v.speakers() {
        return Err(invalid!(
            "mask plan covers {} speakers, features have {}",
            plan.indices.len(),
            v.speakers()
        ));
    }
    let mut out = v.clone();
    for (p, idx) in plan.indices.iter().enumerate() {
        for &f in idx {
            if f >= v.frames() {
                return Err(invalid!("frame index {f} out of range for {} frames", v.frames()));
            }
            out.data.slice_mut(s![p, f, ..]).fill(0.0);
        }
    }
    Ok(out)
}

/// Right-pads with zero frames or truncates so the time axis has exactly `chunks` frames.
pub fn align_to_chunks(v: &VisualFeatures, chunks: usize) -> Array3<f32> {
    let (p, t_v, d_v) = v.data.dim();
    let mut out = Array3::zeros((p, chunks, d_v));
    let keep = t_v.min(chunks);
    out.slice_mut(s![.., ..keep, ..]).assign(&v.data.slice(s![.., ..keep, ..]));
    out
}
