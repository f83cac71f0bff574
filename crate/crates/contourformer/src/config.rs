//! Flat dotted-key configuration files (`model.nq = 300`). Every section
//! field is reachable by key, so experiment variants need no code changes.

use crate::assignment::MatchCostConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Linear warmup epochs before cosine decay.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub denoise: bool,
    pub denoise_slots: usize,
    pub checkpoint_every: usize,
    /// Data-loading worker threads.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 2e-4,
            warmup_epochs: 10,
            seed: 0,
            denoise: true,
            denoise_slots: 100,
            checkpoint_every: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DatasetConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub loss: MatchCostConfig,
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl Config {
    /// Render as sorted `section.key = value` lines; values are JSON
    /// literals (arrays stay on one line).
    pub fn to_text(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut pairs = Vec::new();
        flatten("", &value, &mut pairs);
        pairs.sort();
        let mut s = String::new();
        for (k, v) in pairs {
            s.push_str(&format!("{k} = {v}\n"));
        }
        Ok(s)
    }

    /// Parse dotted-key lines over the defaults. Unknown keys and malformed
    /// values are errors; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Config> {
        let mut value = serde_json::to_value(Config::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, rhs) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let parsed: serde_json::Value =
                serde_json::from_str(rhs.trim()).map_err(|e| {
                    Error::Config(format!("line {}: bad value for {key}: {e}", lineno + 1))
                })?;
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().unwrap();
            let mut node = &mut value;
            for part in parents {
                node = node.get_mut(*part).ok_or_else(|| {
                    Error::Config(format!("line {}: unknown section in {key}", lineno + 1))
                })?;
            }
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("line {}: {key} is not a settable key", lineno + 1))
            })?;
            if !obj.contains_key(*last) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key}",
                    lineno + 1
                )));
            }
            obj.insert((*last).to_string(), parsed);
        }
        let cfg: Config = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config does not typecheck: {e}")))?;
        cfg.model.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_identity() {
        let mut cfg = Config::default();
        cfg.model.nq = 42;
        cfg.loss.lambda_shape = 0.125;
        cfg.train.seed = 9;
        let text = cfg.to_text().unwrap();
        let back = Config::from_text(&text).unwrap();
        assert_eq!(back.model.nq, 42);
        assert_eq!(back.loss.lambda_shape, 0.125);
        assert_eq!(back.train.seed, 9);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = Config::from_text(
            "# ablation\nmodel.cfdr_enabled = false\nmodel.nc = 4\nmodel.nv = 32\nloss.lambda_shape = 0.5\n",
        )
        .unwrap();
        assert!(!cfg.model.cfdr_enabled);
        assert_eq!(cfg.model.nc, 4);
        assert_eq!(cfg.loss.lambda_shape, 0.5);
        // untouched keys keep defaults
        assert_eq!(cfg.model.nq, ModelConfig::default().nq);
    }

    #[test]
    fn arrays_parse() {
        let cfg = Config::from_text("model.backbone_channels = [8,16,32,64]\n").unwrap();
        assert_eq!(cfg.model.backbone_channels, [8, 16, 32, 64]);
    }

    #[test]
    fn errors_are_descriptive() {
        assert!(Config::from_text("model.bogus_key = 3\n").is_err());
        assert!(Config::from_text("model.nq 3\n").is_err());
        assert!(Config::from_text("model.nq = not_json\n").is_err());
        // typecheck failure: invalid model after overrides
        assert!(Config::from_text("model.nc = 7\n").is_err());
    }
}
