//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::envdata::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Directory written by `gen-data` holding pretraining records.
    pub pretrain: Option<PathBuf>,
    /// Directory written by `gen-data` holding demonstrations.
    pub episodes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub env: EnvConfig,
    pub pretrain: PretrainConfig,
    pub policy: PolicyConfig,
    pub data: DataPaths,
    pub eval: EvalConfig,
    /// Metrics are streamed every this many steps (the last step is always logged).
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            env: EnvConfig::default(),
            pretrain: PretrainConfig::default(),
            policy: PolicyConfig::default(),
            data: DataPaths::default(),
            eval: EvalConfig::default(),
            log_every: 10,
        }
    }
}

pub const PLANE_CHOICES: [usize; 4] = [1, 2, 4, 6];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.env.validate()?;
        self.pretrain.validate(&self.encoder)?;
        self.policy.validate(&self.encoder)?;
        if !PLANE_CHOICES.contains(&self.policy.planes) {
            return Err(Error::Config(format!("planes must be one of {PLANE_CHOICES:?}, got {}", self.policy.planes)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        if self.policy.tokenizer.layers[0].points > self.env.obs_points {
            return Err(Error::Config(format!(
                "tokenizer samples {} points but observations carry {}",
                self.policy.tokenizer.layers[0].points, self.env.obs_points
            )));
        }
        Ok(())
    }

    /// Parses strict JSON (unknown keys rejected) and validates.
    /// Parses a config, filling absent keys from `RunConfig::default()` at every depth.
    pub fn from_json(text: &str) -> Result<Self> {
        let over: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !over.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        Self::default().with_overrides(&over)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.pretrain, &mut cfg.data.episodes].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies a JSON object of overrides, merging nested objects key by key.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
