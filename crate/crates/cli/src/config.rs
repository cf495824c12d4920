use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use snnet_core::data::DatasetConfig;
use snnet_core::model::ModelConfig;
use snnet_core::train::TrainConfig;

/// Everything a command may need, read from one JSON file. Missing sections
/// take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    /// Dataset manifest used by `train` and `evaluate`, relative to the
    /// config file unless absolute.
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).with_context(|| format!("invalid config {origin}"))?;
        cfg.model.validate().with_context(|| format!("invalid model section in {origin}"))?;
        cfg.data.validate().with_context(|| format!("invalid data section in {origin}"))?;
        cfg.train.validate().with_context(|| format!("invalid train section in {origin}"))?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syntax_errors_report_position() {
        let err = RunConfig::parse("{\n  \"model\": {,\n}", "cfg.json").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 2 column"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"modle": {}}"#, "x").is_err());
        let cfg = RunConfig::parse(r#"{"train": {"batch_size": 4}}"#, "x").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model, ModelConfig::default());
    }
}
