use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_CLIP_SAMPLES;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::nn::AdamConfig;

/// Which parameters a run optimizes and against which objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Both branches and the interaction modules on the combined spectral loss.
    #[serde(rename = "1")]
    One,
    /// The merge stage only, with everything else frozen.
    #[serde(rename = "2")]
    Two,
    /// The two-output network on the permutation-invariant loss.
    #[serde(rename = "sep")]
    Separation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Separation => "sep",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "sep" => Ok(Stage::Separation),
            _ => Err(Error::Config(format!("unknown stage `{s}`; expected 1, 2 or sep"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Every clip is zero-padded or truncated to this length.
    pub clip_samples: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Rescales gradients to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub shuffle: bool,
    /// After training, reset batch-norm running statistics to their average
    /// over one pass through the training set at the final weights.
    pub recalibrate_bn: bool,
    pub seed: u64,
    /// Emit a progress line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 32,
            clip_samples: DEFAULT_CLIP_SAMPLES,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            grad_clip: None,
            shuffle: true,
            recalibrate_bn: true,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.clip_samples == 0 {
            return Err(Error::Config("batch_size and clip_samples must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}
