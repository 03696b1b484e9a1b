use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, UtteranceRecord};
use super::mixture::derive_seed;
use crate::audio::Waveform;
use crate::error::{invalid, Error, Result};
use crate::visual::synthesize_toy_features;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub sample_rate: u32,
    pub fps: f64,
    pub visual_dim: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 10,
            utterances_per_speaker: 20,
            utterance_seconds: 2.5,
            sample_rate: 16_000,
            fps: 25.0,
            visual_dim: 64,
            seed: 0,
        }
    }
}

/// Centre of speaker `s`'s fundamental-frequency band; bands are spaced
/// geometrically from 100 Hz over a little more than two octaves.
pub fn speaker_f0(s: usize, speakers: usize) -> f64 {
    100.0 * 2f64.powf(2.3 * s as f64 / speakers.max(1) as f64)
}

/// A voiced, syllable-modulated harmonic signal for one utterance of speaker `s`.
pub fn synthesize_utterance(s: usize, utterance: usize, cfg: &ToyCorpusConfig) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let len = (cfg.utterance_seconds * sr).round() as usize;
    let mut timbre = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 10_000 + s as u64));
    let tilt: f64 = timbre.random_range(2.0..8.0);
    let formant: f64 = timbre.random_range(500.0..2500.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, s as u64), utterance as u64));

    let f0 = speaker_f0(s, cfg.speakers) * (1.0 + rng.random_range(-0.02..0.02));
    let vib_rate: f64 = rng.random_range(2.0..5.0);
    let vib_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let syl_rate: f64 = rng.random_range(3.0..5.0);
    let syl_phase: f64 = rng.random_range(0.0..1.0);
    let syllables = (cfg.utterance_seconds * syl_rate).ceil() as usize + 2;
    let syl_amp: Vec<f64> =
        (0..syllables).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.5..1.0) }).collect();
    let harmonics = ((0.45 * sr / (f0 * 1.05)) as usize).min(40);
    let weights: Vec<f64> = (1..=harmonics)
        .map(|h| {
            let fh = h as f64 * f0;
            (-(h as f64 - 1.0) / tilt).exp() + 0.8 * (-((fh - formant) / 400.0).powi(2)).exp()
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    let mut out = vec![0.0; len];
    let mut phi = 0.0f64;
    for (i, y) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + 0.03 * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin());
        phi += std::f64::consts::TAU * f / sr;
        let pos = syl_rate * t + syl_phase;
        let env = syl_amp[pos as usize] * (std::f64::consts::PI * pos.fract()).sin().powi(2);
        if env == 0.0 {
            continue;
        }
        let v: f64 = weights.iter().zip(&phases).enumerate().map(|(h, (w, p))| w * ((h + 1) as f64 * phi + p).sin()).sum();
        *y = env * v;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Writes WAV and VFEA files for every utterance plus `manifest.jsonl` under `out_dir`.
pub fn generate_toy_corpus(out_dir: impl AsRef<Path>, cfg: &ToyCorpusConfig) -> Result<Manifest> {
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 {
        return Err(invalid!("toy corpus needs at least one speaker and one utterance"));
    }
    if !(cfg.utterance_seconds > 0.0) || cfg.visual_dim == 0 {
        return Err(invalid!("toy corpus needs a positive duration and visual width"));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["wav", "visual"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.speakers * cfg.utterances_per_speaker);
    for s in 0..cfg.speakers {
        for u in 0..cfg.utterances_per_speaker {
            let id = format!("spk{s:02}_utt{u:03}");
            let wav_rel = PathBuf::from("wav").join(format!("{id}.wav"));
            let vis_rel = PathBuf::from("visual").join(format!("{id}.vfea"));
            let w = Waveform::new(synthesize_utterance(s, u, cfg), cfg.sample_rate)?;
            w.write_wav(out_dir.join(&wav_rel))?;
            let v = synthesize_toy_features(&w, cfg.fps, cfg.visual_dim, cfg.seed)?;
            v.write(0, out_dir.join(&vis_rel))?;
            records.push(UtteranceRecord {
                utterance_id: id,
                speaker_id: format!("spk{s:02}"),
                wav_path: wav_rel,
                visual_path: Some(vis_rel),
            });
        }
    }
    let manifest = Manifest::new(records, out_dir)?;
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
