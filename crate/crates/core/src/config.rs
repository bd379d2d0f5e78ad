//! The pipeline configuration document and its provenance hash.
//!
//! Values are layered: built-in defaults, then a JSON config file, then
//! command-line overrides. Each layer is a partial JSON object merged key by
//! key into the one below it.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::AudioFeatureConfig;
use crate::dataset::{SplitSpec, DEFAULT_SEQUENCE_LENGTH, SKELETON_FEATURES};
use crate::net::{NetConfig, NetError};
use crate::skeleton::Selection;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not a JSON object")]
    NotAnObject,
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub selection: Selection,
    /// Variance fraction whose component count is reported alongside the model.
    pub variance_target: f64,
    /// Sessions whose frames the PCA is fitted on; all built sessions when empty.
    pub fit_sessions: Vec<String>,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { selection: Selection::Components(SKELETON_FEATURES), variance_target: 0.98, fit_sessions: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seconds: f64,
    pub fps: f64,
    pub sample_rate: u32,
    /// Fraction of joint observations removed.
    pub gap_fraction: f64,
    /// Probability that both annotators give a planted span the same level.
    pub agreement: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seconds: 10.0, fps: 30.0, sample_rate: 16_000, gap_fraction: 0.02, agreement: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub audio: AudioFeatureConfig,
    pub pca: PcaConfig,
    pub sequence_length: usize,
    pub stride: usize,
    pub split: SplitSpec,
    pub net: NetConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            audio: AudioFeatureConfig::default(),
            pca: PcaConfig::default(),
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            stride: 1,
            split: SplitSpec::default(),
            net: NetConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Recursively merges `overlay` into `base`; non-object values replace.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Sets `value` at a dotted path such as `net.hidden_size`, creating objects as needed.
pub fn set_path(doc: &mut Value, path: &str, value: Value) {
    let mut cur = doc;
    for key in path.split('.') {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().expect("just made an object").entry(key.to_string()).or_insert(Value::Null);
    }
    *cur = value;
}

impl PipelineConfig {
    /// Defaults overlaid by each layer in turn.
    pub fn layered(layers: &[Value]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        for layer in layers {
            if !layer.is_object() {
                return Err(ConfigError::NotAnObject);
            }
            merge(&mut doc, layer);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.audio.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sequence_length == 0 || self.stride == 0 {
            return Err(ConfigError::Invalid("sequence_length and stride must be positive".into()));
        }
        if !(self.pca.variance_target > 0.0 && self.pca.variance_target <= 1.0) {
            return Err(ConfigError::Invalid(format!("pca.variance_target {} outside (0, 1]", self.pca.variance_target)));
        }
        let mut net = self.net.clone();
        net.sequence_length = self.sequence_length;
        net.validate().map_err(|e| match e {
            NetError::Config(m) => ConfigError::Invalid(format!("net: {m}")),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        Ok(())
    }

    /// Canonical serialization: fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Short form used in file comments.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
