use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};

pub const ENCODER_KERNEL: (usize, usize) = (3, 5);
pub const RESIDUAL_KERNEL: (usize, usize) = (5, 7);
pub const MERGE_KERNEL: (usize, usize) = (3, 7);
pub const POINTWISE: (usize, usize) = (1, 1);

/// Network hyperparameters. The defaults are the full-size network; tests
/// and desk experiments shrink the channel ladder, block count, and DFT size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// DFT and window length; the model sees `n_fft / 2` frequency bins.
    pub n_fft: usize,
    pub hop: usize,
    /// Encoder channel ladder; the last entry is the feature width `C`.
    pub channels: [usize; 3],
    pub ra_blocks: usize,
    /// Attention projections use `C / attn_divisor` channels.
    pub attn_divisor: usize,
    /// Cross-branch interaction after every RA block.
    pub interaction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_fft: 320, hop: 160, channels: [16, 32, 64], ra_blocks: 4, attn_divisor: 2, interaction: true }
    }
}

impl ModelConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig { n_fft: self.n_fft, hop: self.hop }
    }

    /// Frequency bins fed to the network (the Nyquist bin is dropped).
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2
    }

    pub fn width(&self) -> usize {
        self.channels[2]
    }

    pub fn attn_channels(&self) -> usize {
        attn_width(self.width(), self.attn_divisor)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.freq_bins();
        if self.n_fft < 8 || self.n_fft % 2 != 0 || f % 4 != 0 {
            return Err(Error::Config(format!("n_fft {} must give a bin count divisible by 4", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!("hop {} must lie in 1..=n_fft", self.hop)));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.width() % 2 != 0 {
            return Err(Error::Config(format!("feature width {} must be even", self.width())));
        }
        if self.attn_divisor == 0 {
            return Err(Error::Config("attn_divisor must be positive".into()));
        }
        Ok(())
    }
}

/// Reduced attention width, never below one channel.
pub fn attn_width(c: usize, divisor: usize) -> usize {
    (c / divisor).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_sized() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.freq_bins(), 160);
        assert_eq!(c.attn_channels(), 32);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = ModelConfig { n_fft: 36, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { channels: [4, 8, 15], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"chanels": [1, 2, 4]}"#).is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"ra_blocks": 2}"#).unwrap();
        assert_eq!(c.ra_blocks, 2);
        assert_eq!(c.n_fft, 320);
    }
}
