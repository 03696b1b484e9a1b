//! Training loop: on-the-fly mixture sampling, Adam, plateau learning-rate
//! schedule with early stopping, best-checkpoint retention and a JSONL log.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::data::{derive_seed, render_mixture, sample_mixture_spec, Manifest, MixtureSpec, SamplingMode, SourceBank};
use crate::error::{Error, Result};
use crate::model::AvSepNet;
use crate::nn::{Ctx, Parameterized};
use crate::separator::SeparatorConfig;

const VALID_STREAM: u64 = 0x5641_4c49_4400;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub separator: SeparatorConfig,
    pub lr: f64,
    /// Epochs without a new best validation loss before the learning rate halves.
    pub lr_halve_patience: usize,
    /// Epochs without a new best validation loss before training stops.
    pub stop_patience: usize,
    /// Mixtures per optimiser step (gradients are accumulated).
    pub batch_size: usize,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Hard cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub clip_seconds: f64,
    pub valid_samples: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub sampling: SamplingMode,
    /// Checkpoint to continue from; its config must equal `separator`.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            separator: SeparatorConfig::default(),
            lr: 1.5e-4,
            lr_halve_patience: 3,
            stop_patience: 5,
            batch_size: 1,
            max_epochs: 100,
            steps_per_epoch: 1000,
            max_steps: None,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_manifest: PathBuf::from("train.jsonl"),
            valid_manifest: PathBuf::from("valid.jsonl"),
            clip_seconds: 6.0,
            valid_samples: 100,
            grad_clip: 5.0,
            sampling: SamplingMode::protocol(),
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.checkpoint_dir, &mut cfg.train_manifest, &mut cfg.valid_manifest] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if let Some(r) = cfg.resume.as_mut().filter(|r| r.is_relative()) {
            *r = base_dir.join(&*r);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate("separator")?;
        let field = |name: &str, msg: &str| Err(Error::Config(format!("train.{name}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return field("lr", "must be positive");
        }
        for (name, v) in [
            ("lr_halve_patience", self.lr_halve_patience),
            ("stop_patience", self.stop_patience),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("valid_samples", self.valid_samples),
        ] {
            if v == 0 {
                return field(name, "must be positive");
            }
        }
        if !(self.clip_seconds > 0.0) {
            return field("clip_seconds", "must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return field("grad_clip", "must be non-negative");
        }
        if self.sampling.min_gain_db > self.sampling.max_gain_db {
            return field("sampling.min_gain_db", "exceeds max_gain_db");
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.separator.sample_rate as f64).round() as usize
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new<P: Parameterized<f32>>(model: &P) -> Self {
        let zeros: Vec<ArrayD<f32>> = model.params().iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step<P: Parameterized<f32>>(&mut self, model: &mut P, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let alpha = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((_, p), m), v) in model.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= alpha * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<P: Parameterized<f32>>(model: &mut P, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .map(|(_, p)| p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, p) in model.params_mut() {
            p.grad.mapv_inplace(|g| g * s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Plateau {
    Improved,
    Waiting,
    Halved,
    Stop,
}

/// Best-so-far plateau tracking: a strictly lower loss resets the counter.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    halve_patience: usize,
    stop_patience: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, halve_patience: usize, stop_patience: usize) -> Self {
        Self { lr, best: f64::INFINITY, bad_epochs: 0, halve_patience, stop_patience }
    }

    pub fn observe(&mut self, loss: f64) -> Plateau {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return Plateau::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.stop_patience {
            Plateau::Stop
        } else if self.bad_epochs % self.halve_patience == 0 {
            self.lr /= 2.0;
            Plateau::Halved
        } else {
            Plateau::Waiting
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub best_valid_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub event: Plateau,
    pub seed: u64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: AvSepNet<f32>,
    pub best_checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn mean_loss(net: &AvSepNet<f32>, specs: &[MixtureSpec], bank: &SourceBank, clip: usize, fps: f64) -> Result<f64> {
    let mut total = 0.0;
    for spec in specs {
        let r = render_mixture(spec, bank, clip, fps)?;
        total += net.loss(r.mix.samples(), r.refs.view(), &r.visuals)?.total;
    }
    Ok(total / specs.len() as f64)
}

/// Runs training; `progress` sees every epoch record as it is written.
pub fn train(cfg: &TrainConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sep = &cfg.separator;
    let mut net = match &cfg.resume {
        Some(p) => load_checkpoint_for(p, sep)?,
        None => AvSepNet::<f32>::new(sep)?,
    };
    let train_manifest = Manifest::read(&cfg.train_manifest)?;
    let valid_manifest = Manifest::read(&cfg.valid_manifest)?;
    let train_bank = SourceBank::load(&train_manifest, sep.sample_rate)?;
    let valid_bank = SourceBank::load(&valid_manifest, sep.sample_rate)?;
    let clip = cfg.clip_samples();
    let valid_specs = (0..cfg.valid_samples)
        .map(|i| sample_mixture_spec(&valid_manifest, derive_seed(cfg.seed ^ VALID_STREAM, i as u64), &cfg.sampling))
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let log_path = cfg.checkpoint_dir.join(TRAIN_LOG);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let best_path = cfg.checkpoint_dir.join(BEST_CHECKPOINT);

    let mut adam = Adam::new(&net);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_halve_patience, cfg.stop_patience);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;
    let mut log = Vec::new();
    for epoch in 0..cfg.max_epochs {
        if step >= max_steps {
            break;
        }
        let started = std::time::Instant::now();
        let lr = sched.lr;
        let mut train_total = 0.0;
        let mut draws = 0usize;
        for _ in 0..cfg.steps_per_epoch {
            if step >= max_steps {
                break;
            }
            net.zero_grad();
            for k in 0..cfg.batch_size {
                let draw = (step * cfg.batch_size + k) as u64;
                let spec = sample_mixture_spec(&train_manifest, derive_seed(cfg.seed, draw), &cfg.sampling)?;
                let r = render_mixture(&spec, &train_bank, clip, sep.fps)?;
                let mut ctx = Ctx::train(derive_seed(cfg.seed ^ DROPOUT_STREAM, draw));
                train_total += net.loss_and_backward(r.mix.samples(), r.refs.view(), &r.visuals, &mut ctx)?.total;
                draws += 1;
            }
            if cfg.batch_size > 1 {
                let s = 1.0 / cfg.batch_size as f32;
                for (_, p) in net.params_mut() {
                    p.grad.mapv_inplace(|g| g * s);
                }
            }
            clip_grad_norm(&mut net, cfg.grad_clip);
            adam.step(&mut net, lr);
            step += 1;
        }
        let valid_loss = mean_loss(&net, &valid_specs, &valid_bank, clip, sep.fps)?;
        let event = sched.observe(valid_loss);
        if event == Plateau::Improved {
            save_checkpoint(&net, &best_path)?;
        }
        let entry = EpochLog {
            epoch,
            steps: step,
            train_loss: train_total / draws.max(1) as f64,
            valid_loss,
            best_valid_loss: sched.best,
            lr,
            event,
            seed: cfg.seed,
            seconds: started.elapsed().as_secs_f64(),
        };
        let mut line = serde_json::to_vec(&entry).expect("serialisable");
        line.push(b'\n');
        log_file.write_all(&line).map_err(|e| Error::io(&log_path, e))?;
        progress(&entry);
        log.push(entry);
        if event == Plateau::Stop {
            break;
        }
    }
    save_checkpoint(&net, cfg.checkpoint_dir.join(LAST_CHECKPOINT))?;
    let model = crate::checkpoint::load_checkpoint(&best_path)?;
    Ok(TrainOutcome { model, best_checkpoint: best_path, log, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_for_three_epochs_halves_once() {
        let mut s = PlateauScheduler::new(1.0, 3, 5);
        assert_eq!(s.observe(1.0), Plateau::Improved);
        let events: Vec<_> = (0..3).map(|_| s.observe(1.0)).collect();
        assert_eq!(events, vec![Plateau::Waiting, Plateau::Waiting, Plateau::Halved]);
        assert_eq!(s.lr, 0.5);
        assert_eq!(s.observe(0.5), Plateau::Improved);
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn plateau_for_five_epochs_stops() {
        let mut s = PlateauScheduler::new(1.0, 3, 5);
        s.observe(2.0);
        let events: Vec<_> = (0..5).map(|_| s.observe(2.5)).collect();
        assert_eq!(events.last(), Some(&Plateau::Stop));
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let mut s = PlateauScheduler::new(1.0, 3, 5);
        let mut best = Vec::new();
        for l in [3.0, 2.0, 2.5, 1.0, 1.5] {
            s.observe(l);
            best.push(s.best);
        }
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        use crate::nn::Param;
        let mut p = Param::<f32>::filled(&[3], 1.0);
        p.grad.assign(&ndarray::arr1(&[1.0f32, -2.0, 0.0]).into_dyn());
        let mut adam = Adam::new(&p);
        adam.step(&mut p, 0.1);
        let v: Vec<f32> = p.value.iter().copied().collect();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] - 1.1).abs() < 1e-6 && v[2] == 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        use crate::nn::Param;
        let mut p = Param::<f32>::zeros(&[2]);
        p.grad.assign(&ndarray::arr1(&[3.0f32, 4.0]).into_dyn());
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        let g: Vec<f32> = p.grad.iter().copied().collect();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = TrainConfig::from_toml("lr = -1.0", Path::new(".")).unwrap_err().to_string();
        assert!(e.starts_with("config error: train.lr"), "{e}");
        let e = TrainConfig::from_toml("[separator]\nheads = 3", Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("separator.heads"), "{e}");
        let e = TrainConfig::from_toml("bogus = 1", Path::new(".")).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let cfg = TrainConfig::from_toml("[sampling]\nspeakers = { fixed = 2 }", Path::new("/base")).unwrap();
        assert_eq!(cfg.sampling.speakers, crate::data::SpeakerCount::Fixed(2));
        assert_eq!(cfg.train_manifest, PathBuf::from("/base/train.jsonl"));
    }
}
