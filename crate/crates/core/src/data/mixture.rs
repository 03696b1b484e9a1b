use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SourceBank};
use crate::audio::Waveform;
use crate::error::{invalid, Error, Result};
use crate::visual::{mask_frames, video_frames, FrameMaskPlan, VisualFeatures};

pub const MIN_SPEAKERS: usize = 2;
pub const MAX_SPEAKERS: usize = 5;
/// Probabilities of 2, 3, 4 and 5 speakers.
pub const SPEAKER_COUNT_PROBS: [f64; 4] = [0.4, 0.2, 0.2, 0.2];
pub const CUE_ABSENCE_PROB: f64 = 0.1;

/// Mixes `base` and `index` into an independent 64-bit seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub utterance_id: String,
    /// Gain in dB as a decimal string, so replay never depends on float formatting.
    pub gain_db: String,
}

impl Component {
    pub fn gain(&self) -> Result<f64> {
        let db: f64 = self
            .gain_db
            .parse()
            .map_err(|_| Error::Format(format!("gain {:?} is not a decimal number", self.gain_db)))?;
        Ok(10f64.powf(db / 20.0))
    }
}

/// Replayable description of one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub sample_id: String,
    pub components: Vec<Component>,
    pub n_speakers: usize,
    pub visual_present: Vec<bool>,
    pub frame_mask_rate: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn guided(&self) -> usize {
        self.visual_present.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.components.len();
        if n != self.n_speakers || self.visual_present.len() != n {
            return Err(Error::Data(format!(
                "{}: {} components, n_speakers {}, {} presence flags",
                self.sample_id,
                n,
                self.n_speakers,
                self.visual_present.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.frame_mask_rate) {
            return Err(Error::Data(format!("{}: frame mask rate outside [0, 1]", self.sample_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerCount {
    /// 2, 3, 4 or 5 speakers in the ratio 2:1:1:1.
    Protocol,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueAbsence {
    /// With probability 0.1, one or two cues (uniformly, at most N-1) are missing.
    Protocol,
    /// Exactly this many speakers keep their cue.
    Guided(usize),
}

/// How [`sample_mixture_spec`] draws speaker count, cues and gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingMode {
    pub speakers: SpeakerCount,
    pub cues: CueAbsence,
    pub frame_mask_rate: f64,
    pub min_gain_db: f64,
    pub max_gain_db: f64,
}

impl Default for SamplingMode {
    fn default() -> Self {
        Self::protocol()
    }
}

impl SamplingMode {
    pub fn protocol() -> Self {
        Self {
            speakers: SpeakerCount::Protocol,
            cues: CueAbsence::Protocol,
            frame_mask_rate: 0.0,
            min_gain_db: -5.0,
            max_gain_db: 5.0,
        }
    }

    pub fn fixed(n: usize, guided: usize, frame_mask_rate: f64) -> Self {
        Self {
            speakers: SpeakerCount::Fixed(n),
            cues: CueAbsence::Guided(guided),
            frame_mask_rate,
            ..Self::protocol()
        }
    }
}

/// Draws a mixture description; deterministic in `(manifest, seed, mode)`.
pub fn sample_mixture_spec(manifest: &Manifest, seed: u64, mode: &SamplingMode) -> Result<MixtureSpec> {
    let speakers = manifest.by_speaker();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = match mode.speakers {
        SpeakerCount::Protocol => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut n = MAX_SPEAKERS;
            for (k, p) in SPEAKER_COUNT_PROBS.iter().enumerate() {
                acc += p;
                if u < acc {
                    n = MIN_SPEAKERS + k;
                    break;
                }
            }
            n
        }
        SpeakerCount::Fixed(n) => n,
    };
    if !(1..=MAX_SPEAKERS).contains(&n) {
        return Err(invalid!("speaker count {n} outside 1..={MAX_SPEAKERS}"));
    }
    if speakers.len() < n {
        return Err(Error::Data(format!("{n} speakers requested, manifest has {}", speakers.len())));
    }
    if matches!(mode.speakers, SpeakerCount::Protocol) && speakers.len() < MAX_SPEAKERS {
        return Err(Error::Data(format!(
            "protocol sampling needs {MAX_SPEAKERS} distinct speakers, manifest has {}",
            speakers.len()
        )));
    }
    let ids: Vec<&Vec<usize>> = speakers.values().collect();
    let mut chosen = rand::seq::index::sample(&mut rng, ids.len(), n).into_vec();
    chosen.sort_unstable();
    let mut components = Vec::with_capacity(n);
    for &s in &chosen {
        let utts = ids[s];
        let r = &manifest.records[utts[rng.random_range(0..utts.len())]];
        let db = rng.random_range(mode.min_gain_db..=mode.max_gain_db);
        components.push(Component { utterance_id: r.utterance_id.clone(), gain_db: format!("{db:.6}") });
    }
    let absent = match mode.cues {
        CueAbsence::Protocol => {
            if rng.random_bool(CUE_ABSENCE_PROB) {
                let k = if rng.random_bool(0.5) { 1 } else { 2 };
                k.min(n - 1)
            } else {
                0
            }
        }
        CueAbsence::Guided(p) => {
            if p > n {
                return Err(invalid!("{p} guided speakers for {n}"));
            }
            n - p
        }
    };
    let mut visual_present = vec![true; n];
    for i in rand::seq::index::sample(&mut rng, n, absent) {
        visual_present[i] = false;
    }
    Ok(MixtureSpec {
        sample_id: format!("mix_{seed:016x}"),
        components,
        n_speakers: n,
        visual_present,
        frame_mask_rate: mode.frame_mask_rate,
        seed,
    })
}

/// `n_samples` specs for one evaluation condition; sample ids encode the condition and index.
pub fn materialize_test_set(
    manifest: &Manifest,
    n_samples: usize,
    n: usize,
    guided: usize,
    frame_mask_rate: f64,
    seed: u64,
) -> Result<Vec<MixtureSpec>> {
    let mode = SamplingMode::fixed(n, guided, frame_mask_rate);
    (0..n_samples)
        .map(|i| {
            let mut spec = sample_mixture_spec(manifest, derive_seed(seed, i as u64), &mode)?;
            spec.sample_id = format!("n{n}_p{guided}_r{frame_mask_rate}_{i:05}");
            Ok(spec)
        })
        .collect()
}

/// A rendered mixture; `refs` and `source_order` list guided speakers first,
/// each group in component order.
#[derive(Clone, Debug)]
pub struct RenderedMixture {
    pub mix: Waveform,
    /// `[N, T]`, post-gain sources.
    pub refs: Array2<f64>,
    pub visuals: VisualFeatures,
    /// Component index of every row of `refs`.
    pub source_order: Vec<usize>,
}

impl RenderedMixture {
    pub fn ref_waveforms(&self) -> Result<Vec<Waveform>> {
        self.refs.outer_iter().map(|r| Waveform::new(r.to_vec(), self.mix.sample_rate())).collect()
    }
}

/// Crops (seeded by the spec) or right-pads every source to `clip_samples`,
/// applies gains and sums in component order.
pub fn render_mixture(spec: &MixtureSpec, bank: &SourceBank, clip_samples: usize, fps: f64) -> Result<RenderedMixture> {
    spec.validate()?;
    if clip_samples == 0 {
        return Err(invalid!("clip length must be positive"));
    }
    let sr = bank.sample_rate;
    let t_v = video_frames(clip_samples, sr, fps);
    let frame_hop = sr as f64 / fps;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let mut speakers = std::collections::HashSet::new();
    let mut sources = Vec::with_capacity(spec.n_speakers);
    let mut tracks = Vec::new();
    for (c, present) in spec.components.iter().zip(&spec.visual_present) {
        let src = bank.get(&c.utterance_id)?;
        if !speakers.insert(src.speaker_id.as_str()) {
            return Err(Error::Data(format!("{}: speaker {} appears twice", spec.sample_id, src.speaker_id)));
        }
        let x = src.audio.samples();
        // crop start on a video frame boundary so audio and lips stay aligned
        let (start, vstart) = if x.len() > clip_samples {
            let frames = ((x.len() - clip_samples) as f64 / frame_hop).floor() as usize;
            let f = rng.random_range(0..=frames);
            ((f as f64 * frame_hop).round() as usize, f)
        } else {
            (0, 0)
        };
        let g = c.gain()?;
        let mut y = vec![0.0; clip_samples];
        for (dst, &v) in y.iter_mut().zip(&x[start.min(x.len())..]) {
            *dst = g * v;
        }
        sources.push(y);
        if *present {
            let track = src.visual.as_ref().ok_or_else(|| {
                Error::Data(format!("{}: utterance {} has no visual track", spec.sample_id, c.utterance_id))
            })?;
            let mut v = Array2::<f32>::zeros((t_v, track.ncols()));
            let avail = track.nrows().saturating_sub(vstart).min(t_v);
            v.slice_mut(s![..avail, ..]).assign(&track.slice(s![vstart..vstart + avail, ..]));
            tracks.push(v);
        }
    }

    let mut mix = vec![0.0; clip_samples];
    for y in &sources {
        for (m, v) in mix.iter_mut().zip(y) {
            *m += v;
        }
    }
    let order: Vec<usize> = (0..spec.n_speakers)
        .filter(|&i| spec.visual_present[i])
        .chain((0..spec.n_speakers).filter(|&i| !spec.visual_present[i]))
        .collect();
    let refs = Array2::from_shape_fn((spec.n_speakers, clip_samples), |(r, t)| sources[order[r]][t]);

    let p = tracks.len();
    let dim = tracks.first().map_or(0, |t| t.ncols());
    if tracks.iter().any(|t| t.ncols() != dim) {
        return Err(Error::Data(format!("{}: visual tracks differ in width", spec.sample_id)));
    }
    let mut data = Array3::<f32>::zeros((p, t_v, dim));
    for (i, t) in tracks.iter().enumerate() {
        data.slice_mut(s![i, .., ..]).assign(t);
    }
    let present: Vec<bool> = (0..spec.n_speakers).map(|i| i < p).collect();
    let mut visuals = VisualFeatures::new(data, fps, present)?;
    if spec.frame_mask_rate > 0.0 && p > 0 {
        let mut mrng = ChaCha8Rng::seed_from_u64(spec.seed);
        mrng.set_stream(2);
        let plan = FrameMaskPlan::sample(spec.frame_mask_rate, mrng.random(), p, t_v)?;
        visuals = mask_frames(&visuals, &plan)?;
    }
    Ok(RenderedMixture { mix: Waveform::new(mix, sr)?, refs, visuals, source_order: order })
}
