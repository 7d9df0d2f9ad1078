//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::{OptimConfig, TaskSpec};
use crate::nets::{digest_json, ModelConfig};
use crate::quant::{Granularity, QuantAxis, QuantMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    /// Both endpoints in one process.
    #[default]
    Local,
    Server,
    Client,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub role: NetRole,
    #[serde(default)]
    pub listen: Option<String>,
    #[serde(default)]
    pub connect: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub optim: OptimConfig,
    pub quant: QuantMode,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Output directory for metrics and checkpoints.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
}

#[derive(Serialize)]
struct SessionKey<'a> {
    model: &'a ModelConfig,
    task: &'a TaskSpec,
    optim: &'a OptimConfig,
    quant: &'a QuantMode,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.optim.validate()?;
        self.quant.validate()?;
        if self.model.vocab_size < self.task.vocab_size() {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the task vocabulary {}",
                self.model.vocab_size,
                self.task.vocab_size()
            )));
        }
        if self.model.max_seq_len < self.task.input_len() {
            return Err(Error::Config(format!(
                "model.max_seq_len {} is shorter than task inputs of {}",
                self.model.max_seq_len,
                self.task.input_len()
            )));
        }
        if self.optim.batch_size > self.task.train_size {
            return Err(Error::Config(format!(
                "optim.batch_size {} exceeds task.train_size {}",
                self.optim.batch_size, self.task.train_size
            )));
        }
        if let QuantMode::Fixed { granularity, .. } | QuantMode::Aqsgd { granularity, .. } = self.quant {
            if let Granularity::Group(g) = granularity {
                if g > u16::MAX as usize {
                    return Err(Error::Config(format!("quant.granularity.group {g} exceeds 65535")));
                }
            }
        }
        if let QuantMode::Amaq {
            axis: QuantAxis::Token, ..
        } = self.quant
        {
            if self.model.max_seq_len > u16::MAX as usize {
                return Err(Error::Config("per-token gates need max_seq_len <= 65535".into()));
            }
        }
        Ok(())
    }

    /// Digest of everything both endpoints must agree on.
    pub fn digest(&self) -> String {
        let key = SessionKey {
            model: &self.model,
            task: &self.task,
            optim: &self.optim,
            quant: &self.quant,
        };
        digest_json(&serde_json::to_string(&key).expect("config serializes"))
    }

    /// Parses JSON text, applying `key=value` overrides (dotted paths)
    /// before schema validation.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at {path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }
}

/// Sets the leaf at a dotted path. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {k} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override path in {spec:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_leaf() {
        let mut v: Value = serde_json::json!({"optim": {"steps": 3}});
        apply_override(&mut v, "optim.steps=10").unwrap();
        apply_override(&mut v, "quant.mode=none").unwrap();
        assert_eq!(v["optim"]["steps"], 10);
        assert_eq!(v["quant"]["mode"], "none");
        assert!(apply_override(&mut v, "nokey").is_err());
    }
}
