//! Experiment configuration: one JSON document drives every command.
//!
//! Unknown keys are rejected and type errors carry the path to the
//! offending field. Fields left out are filled from the model preset named
//! by `model_id` and from the documented defaults of each section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::SyntheticConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::registry::{self, RegistryError};
use crate::training::TrainConfig;

pub const DEFAULT_DATASET_ID: &str = "folder";
pub const DEFAULT_OUTPUT_DIR: &str = "runs/default";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    Override(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_changefft: Option<bool>,
    #[serde(default = "default_dataset_id")]
    pub dataset_id: String,
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_dataset_id() -> String {
    DEFAULT_DATASET_ID.to_string()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(DEFAULT_OUTPUT_DIR)
}

impl ExperimentConfig {
    /// Deserializes, fills model fields from the preset and validates.
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let preset = registry::models().resolve(&cfg.model_id)?.preset();
        cfg.encoder.get_or_insert(preset.encoder);
        cfg.decoder.get_or_insert(preset.decoder);
        cfg.use_changefft.get_or_insert(preset.use_changefft);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        registry::models().resolve(&self.model_id)?;
        registry::datasets().resolve(&self.dataset_id)?;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model_config().validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.synthetic.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    /// Architecture described by this config.
    pub fn model_config(&self) -> ModelConfig {
        let preset = || registry::models().resolve(&self.model_id).map(|m| m.preset()).unwrap_or_default();
        ModelConfig {
            encoder: self.encoder.clone().unwrap_or_else(|| preset().encoder),
            decoder: self.decoder.clone().unwrap_or_else(|| preset().decoder),
            use_changefft: self.use_changefft.unwrap_or_else(|| preset().use_changefft),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_with(text, &[])
}

/// Parses `text` after applying `key=value` overrides.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    ExperimentConfig::from_value(value)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_with(&text, overrides)
}

/// Sets the dotted `key` of `root` to `value`. The value is read as JSON when
/// it parses as JSON and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(assignment.to_string());
    let (key, raw) = assignment.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = key.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(bad)?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut().ok_or_else(bad)?.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
