//! The complete audio-visual separation network: encoder, mask network and decoder.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_grad, LossBreakdown, SiSdrOptions};
use crate::nn::{cast, impl_parameterized, Ctx, Parameterized, Real};
use crate::separator::{Separator, SeparatorCache, SeparatorConfig};
use crate::visual::VisualFeatures;

#[derive(Clone, Debug)]
pub struct AvSepNet<A> {
    config: SeparatorConfig,
    pub encoder: Encoder<A>,
    pub separator: Separator<A>,
    pub decoder: Decoder<A>,
}

impl_parameterized!(AvSepNet { encoder, separator, decoder });

pub struct ModelCache<A> {
    frames: Array2<A>,
    enc: Array2<A>,
    mask: Array3<A>,
    masked: Array3<A>,
    separator: SeparatorCache<A>,
}

impl<A: Real> AvSepNet<A> {
    /// Builds a network with parameters drawn from `config.init_seed`.
    pub fn new(config: &SeparatorConfig) -> Result<Self> {
        config.validate("separator")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = Encoder::new(config.kernel_size, config.dim, &mut rng);
        let separator = Separator::new(config, &mut rng);
        let decoder = Decoder::new(config.kernel_size, config.dim, &mut rng);
        Ok(Self { config: config.clone(), encoder, separator, decoder })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    /// Estimates `[n, T]` from mixture samples.
    pub fn forward(
        &self,
        x: &[A],
        v: &VisualFeatures,
        n: usize,
        ctx: &mut Ctx,
    ) -> Result<(Array2<A>, ModelCache<A>)> {
        let (enc, frames) = self.encoder.forward(x);
        let (mask, separator) = self.separator.forward(enc.view(), v, n, ctx)?;
        let masked = &mask * &enc.view().insert_axis(Axis(0));
        let est = self.decoder.forward(masked.view(), x.len());
        Ok((est, ModelCache { frames, enc, mask, masked, separator }))
    }

    /// Accumulates parameter gradients for `d est`.
    pub fn backward(&mut self, cache: ModelCache<A>, d_est: ArrayView2<A>) {
        let ModelCache { frames, enc, mask, masked, separator } = cache;
        let d_masked = self.decoder.backward(masked.view(), d_est);
        let d_mask = &d_masked * &enc.view().insert_axis(Axis(0));
        let mut d_enc = (&d_masked * &mask).sum_axis(Axis(0));
        d_enc += &self.separator.backward(separator, d_mask);
        self.encoder.backward(&frames, d_enc.view());
    }

    /// Forward pass, combined loss against `refs` (`[N, T]`, guided rows first)
    /// and gradient accumulation. Returns the loss terms.
    pub fn loss_and_backward(
        &mut self,
        mix: &[f64],
        refs: ArrayView2<f64>,
        v: &VisualFeatures,
        ctx: &mut Ctx,
    ) -> Result<LossBreakdown> {
        let x: Vec<A> = mix.iter().map(|&s| cast(s)).collect();
        let (est, cache) = self.forward(&x, v, refs.nrows(), ctx)?;
        let est64 = est.mapv(|e| e.to_f64().unwrap_or(f64::NAN));
        let (loss, grad) = combined_loss_grad(est64.view(), refs, v.speakers(), SiSdrOptions::default())?;
        self.backward(cache, grad.mapv(cast::<A>).view());
        Ok(loss)
    }

    /// Combined loss without gradients.
    pub fn loss(&self, mix: &[f64], refs: ArrayView2<f64>, v: &VisualFeatures) -> Result<LossBreakdown> {
        let x: Vec<A> = mix.iter().map(|&s| cast(s)).collect();
        let (est, _) = self.forward(&x, v, refs.nrows(), &mut Ctx::eval())?;
        let est64 = est.mapv(|e| e.to_f64().unwrap_or(f64::NAN));
        combined_loss_grad(est64.view(), refs, v.speakers(), SiSdrOptions::default()).map(|(l, _)| l)
    }

    /// Separates `mix` into `n` waveforms; guided speakers come first.
    pub fn separate(&self, mix: &Waveform, v: &VisualFeatures, n: usize) -> Result<Vec<Waveform>> {
        if mix.sample_rate() != self.config.sample_rate {
            return Err(Error::Data(format!(
                "mixture sample rate {} Hz, model expects {} Hz",
                mix.sample_rate(),
                self.config.sample_rate
            )));
        }
        let enc = self.encoder.encode(mix)?;
        let masks = self.separator.masks(&enc, v, n)?;
        let masked = &masks.data * &enc.data.view().insert_axis(Axis(0));
        self.decoder.decode(masked.view(), mix.len(), mix.sample_rate())
    }
}

/// Parameter totals per component.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub separator: usize,
    pub total: usize,
}

impl<A: Real> AvSepNet<A> {
    pub fn param_counts(&self) -> ParamCounts {
        let encoder = self.encoder.num_params();
        let decoder = self.decoder.num_params();
        let separator = self.separator.num_params();
        ParamCounts { encoder, decoder, separator, total: encoder + decoder + separator }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SeparatorConfig {
        SeparatorConfig {
            kernel_size: 4,
            chunk_size: 4,
            dim: 8,
            layers: 1,
            blocks: 1,
            heads: 2,
            ffn_width: 16,
            max_speakers: 3,
            dropout: 0.0,
            visual_dim: 8,
            fps: 1000.0,
            ..Default::default()
        }
    }

    fn visuals(p: usize, n: usize, frames: usize, dim: usize) -> VisualFeatures {
        let data = Array3::from_shape_fn((p, frames, dim), |(a, b, c)| ((a * 7 + b * 3 + c) as f32 * 0.37).sin());
        VisualFeatures::new(data, 1000.0, (0..n).map(|i| i < p).collect()).unwrap()
    }

    #[test]
    fn output_shapes_and_rate_check() {
        let net = AvSepNet::<f32>::new(&tiny()).unwrap();
        let mix = Waveform::new((0..40).map(|i| (i as f64 * 0.3).sin()).collect(), 16000).unwrap();
        let out = net.separate(&mix, &visuals(1, 3, 10, 8), 3).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|w| w.len() == 40));
        let wrong = Waveform::new(vec![0.1; 40], 8000).unwrap();
        assert!(matches!(net.separate(&wrong, &visuals(1, 3, 10, 8), 3), Err(Error::Data(_))));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut net = AvSepNet::<f64>::new(&tiny()).unwrap();
        let t = 24;
        let mix: Vec<f64> = (0..t).map(|i| (i as f64 * 0.7).sin() + 0.3 * (i as f64 * 1.9).cos()).collect();
        let refs = Array2::from_shape_fn((2, t), |(r, i)| ((i * (r + 2)) as f64 * 0.45).sin());
        let v = visuals(1, 2, 11, 8);
        net.zero_grad();
        net.loss_and_backward(&mix, refs.view(), &v, &mut Ctx::eval()).unwrap();
        let grads: Vec<(String, Vec<f64>)> =
            net.params().into_iter().map(|(n, p)| (n, p.grad.iter().copied().collect())).collect();
        let h = 1e-5;
        for (name, g) in &grads {
            for k in (0..g.len()).step_by(7) {
                let bump = |net: &mut AvSepNet<f64>, d: f64| {
                    let mut ps = net.params_mut();
                    let p = &mut ps.iter_mut().find(|(n, _)| n == name).unwrap().1;
                    let slot = p.value.iter_mut().nth(k).unwrap();
                    *slot += d;
                };
                bump(&mut net, h);
                let up = net.loss(&mix, refs.view(), &v).unwrap().total;
                bump(&mut net, -2.0 * h);
                let down = net.loss(&mix, refs.view(), &v).unwrap().total;
                bump(&mut net, h);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{k}]: fd {fd} vs {}", g[k]);
            }
        }
    }
}
