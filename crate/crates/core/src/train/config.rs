//! Run configuration, stored as JSON with every field spelled out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::substrate::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub batch_size: usize,
    /// Stops early (and shortens the cosine) when set.
    pub max_steps: Option<u64>,
    /// Extra checkpoint period in steps; `0` writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 3,
            batch_size: 4,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub loss_lambda: f64,
    /// Ground truth above this depth is excluded from evaluation.
    pub eval_cap: f64,
    pub data: PathBuf,
    pub output: PathBuf,
    /// Serial execution for bitwise reproducibility.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            loss_lambda: crate::loss::TRAIN_LAMBDA,
            eval_cap: 10.0,
            data: PathBuf::from("data"),
            output: PathBuf::from("run"),
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if s.epochs == 0 || s.warmup_epochs >= s.epochs {
            return Err(Error::Config(format!(
                "need warmup_epochs < epochs, got {} and {}",
                s.warmup_epochs, s.epochs
            )));
        }
        if s.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && o.clip_norm >= 0.0) {
            return Err(Error::Config("optimizer settings must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eval_cap <= self.model.depth.min {
            return Err(Error::Config(format!(
                "eval cap {} is not above the minimum depth {}",
                self.eval_cap, self.model.depth.min
            )));
        }
        Ok(())
    }

    /// Checks that the dataset exists.
    pub fn check_paths(&self) -> Result<()> {
        let index = self.data.join("index.json");
        if !index.is_file() {
            return Err(Error::Config(format!(
                "dataset index {} does not exist",
                index.display()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_is_exact() {
        let mut c = RunConfig::default();
        c.optim.lr = 0.1 + 0.2;
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn missing_field_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("loss_lambda");
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        let mut c = RunConfig::default();
        c.schedule.warmup_epochs = c.schedule.epochs;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
