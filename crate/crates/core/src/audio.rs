use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// A mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid!("waveform is empty"));
        }
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid!("non-finite sample at index {i}"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len.max(1)], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|s| s * gain).collect(), sample_rate: self.sample_rate }
    }

    /// Reads a 16-bit PCM mono RIFF file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format(format!(
                "{}: expected mono, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Format(format!("{}: expected 16-bit PCM", path.display())));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Self::new(samples, spec.sample_rate)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Reads a WAV file and rejects it unless it is at `sample_rate` (no resampling).
    pub fn read_wav_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let w = Self::read_wav(path.as_ref())?;
        if w.sample_rate != sample_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} Hz, expected {} Hz",
                path.as_ref().display(),
                w.sample_rate,
                sample_rate
            )));
        }
        Ok(w)
    }

    /// Writes 16-bit PCM mono; samples are clipped to [-1, 1).
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
