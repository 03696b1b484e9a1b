use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the separation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    /// Encoder/decoder kernel in samples (stride is half of it).
    pub kernel_size: usize,
    /// Chunk length in encoder frames (hop is half of it).
    pub chunk_size: usize,
    /// Feature width.
    pub dim: usize,
    /// Transformer layers in each local and global content attention stack.
    pub layers: usize,
    /// Number of separator blocks.
    pub blocks: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Largest supported speaker count; sizes the speaker-slot table.
    pub max_speakers: usize,
    pub dropout: f64,
    /// Width of the incoming visual features; projected to `dim` when different.
    pub visual_dim: usize,
    pub gav_enabled: bool,
    pub sai_enabled: bool,
    pub savi_enabled: bool,
    /// Rectify the overlap-added mask before it multiplies the encoder output.
    pub mask_relu: bool,
    pub sample_rate: u32,
    pub fps: f64,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            kernel_size: 16,
            chunk_size: 160,
            dim: 256,
            layers: 2,
            blocks: 5,
            heads: 8,
            ffn_width: 1024,
            max_speakers: 5,
            dropout: 0.1,
            visual_dim: 256,
            gav_enabled: true,
            sai_enabled: true,
            savi_enabled: true,
            mask_relu: false,
            sample_rate: 16_000,
            fps: 25.0,
            init_seed: 0,
        }
    }
}

impl SeparatorConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    /// Checks every field; errors name the offending field under `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str, msg: &str| Error::Config(format!("{prefix}.{name}: {msg}"));
        let even = |name: &str, v: usize| {
            if v < 2 || v % 2 != 0 {
                Err(field(name, &format!("must be an even number >= 2, got {v}")))
            } else {
                Ok(())
            }
        };
        even("kernel_size", self.kernel_size)?;
        even("chunk_size", self.chunk_size)?;
        for (name, v) in [
            ("dim", self.dim),
            ("layers", self.layers),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("max_speakers", self.max_speakers),
            ("visual_dim", self.visual_dim),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(field("heads", &format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field("dropout", "must be in [0, 1)"));
        }
        if self.sample_rate == 0 {
            return Err(field("sample_rate", "must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(field("fps", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SeparatorConfig::default();
        c.validate("separator").unwrap();
        assert_eq!((c.kernel_size, c.chunk_size, c.dim, c.layers, c.blocks), (16, 160, 256, 2, 5));
        assert_eq!(c.head_dim(), 32);
    }

    #[test]
    fn validation_names_the_field() {
        let c = SeparatorConfig { heads: 3, ..Default::default() };
        let e = c.validate("separator").unwrap_err().to_string();
        assert!(e.contains("separator.heads"), "{e}");
        let c = SeparatorConfig { chunk_size: 7, ..Default::default() };
        assert!(c.validate("x").unwrap_err().to_string().contains("x.chunk_size"));
    }
}
