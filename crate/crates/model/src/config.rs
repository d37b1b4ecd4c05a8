//! Stage configuration files: JSON with every field optional, unknown keys
//! rejected and constraint violations reported against the offending key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::data::DataConfig;
use crate::model::ModelConfig;

/// Labelled real-fraction presets.
pub const MIXTURE_PRESETS: [(&str, f64); 5] = [
    ("100real", 1.0),
    ("99real", 0.99),
    ("95real", 0.95),
    ("50real", 0.5),
    ("0real", 0.0),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key {key:?}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Io { .. } => None,
        }
    }

    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

/// Probability that a batch item is drawn from the real pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub p_real: f64,
}

impl MixtureConfig {
    pub fn new(p_real: f64) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&p_real) {
            return Err(ConfigError::invalid("p_real", format!("{p_real} is outside [0, 1]")));
        }
        Ok(Self { p_real })
    }

    pub fn preset(label: &str) -> Option<Self> {
        MIXTURE_PRESETS
            .iter()
            .find(|(l, _)| *l == label)
            .map(|&(_, p_real)| Self { p_real })
    }

    pub fn presets() -> Vec<Self> {
        MIXTURE_PRESETS.iter().map(|&(_, p_real)| Self { p_real }).collect()
    }

    /// Preset label if this is a preset value.
    pub fn label(&self) -> Option<&'static str> {
        MIXTURE_PRESETS
            .iter()
            .find(|(_, p)| *p == self.p_real)
            .map(|(l, _)| *l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Probability of replacing a caption with the null caption (Stage I).
    pub caption_dropout: f64,
    pub p_real: f64,
    /// Mixture preset label; overrides `p_real`.
    pub preset: Option<String>,
    pub hsv_enabled: bool,
    /// Also recolour coarse synthetic controls.
    pub hsv_synthetic: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub run_dir: PathBuf,
    /// Stage I checkpoint that Stage II starts from.
    pub init_checkpoint: Option<PathBuf>,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            caption_dropout: 0.1,
            p_real: 0.99,
            preset: None,
            hsv_enabled: true,
            hsv_synthetic: false,
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            run_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
            log_every: 10,
            checkpoint_every: 500,
        }
    }
}

impl StageConfig {
    /// Small end-to-end setup: 16x16 four-frame clips, 200 real clips,
    /// 5 pairs, 200 steps.
    pub fn micro() -> Self {
        let mut c = Self {
            steps: 200,
            checkpoint_every: 100,
            ..Self::default()
        };
        c.data.real = 200;
        c.data.pairs = 5;
        c.data.heldout = 10;
        c.data.corpus = c.data.corpus.with_resolution(16, 16, 4);
        c.model.frames = 4;
        c.model.height = 16;
        c.model.width = 16;
        c.model.feature_patch = 4;
        c.model.feature_channels = 32;
        c.model.dit.width = 64;
        c.model.adapter_hidden = 64;
        c
    }

    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig { p_real: self.p_real }
    }

    /// Applies the preset, then checks every constraint.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        if let Some(label) = &self.preset {
            let m = MixtureConfig::preset(label).ok_or_else(|| {
                let known: Vec<&str> = MIXTURE_PRESETS.iter().map(|p| p.0).collect();
                ConfigError::invalid("preset", format!("unknown preset {label:?}, expected one of {known:?}"))
            })?;
            self.p_real = m.p_real;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !matches!(self.stage, 1 | 2) {
            return Err(ConfigError::invalid("stage", format!("{} is not 1 or 2", self.stage)));
        }
        MixtureConfig::new(self.p_real)?;
        if self.steps == 0 {
            return Err(ConfigError::invalid("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ConfigError::invalid("lr", "must be positive"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ConfigError::invalid(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(ConfigError::invalid("eps", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(ConfigError::invalid("clip_norm", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(ConfigError::invalid("caption_dropout", "must lie in [0, 1]"));
        }
        if self.log_every == 0 {
            return Err(ConfigError::invalid("log_every", "must be at least 1"));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::invalid("model", e.to_string()))?;
        let c = &self.data.corpus;
        // An on-disk corpus carries its own clip shape, checked once it is loaded.
        if self.data.resolved_root().is_none() && (c.height, c.width, c.frames) != (self.model.height, self.model.width, self.model.frames) {
            return Err(ConfigError::invalid(
                "data.corpus",
                format!(
                    "corpus clips {}x{}x{} differ from model input {}x{}x{}",
                    c.frames, c.height, c.width, self.model.frames, self.model.height, self.model.width
                ),
            ));
        }
        Ok(())
    }

    /// Hash of everything that determines the trained weights other than
    /// the step budget and bookkeeping paths.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for k in ["steps", "run_dir", "log_every", "checkpoint_every", "preset"] {
                map.remove(k);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a config document; empty input yields all defaults.
pub fn parse_config(text: &str) -> Result<StageConfig, ConfigError> {
    if text.trim().is_empty() {
        return StageConfig::default().resolve();
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: StageConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let key = match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(field) if path == "." => field.to_string(),
            Some(field) if !path.ends_with(field) => format!("{path}.{field}"),
            _ => path,
        };
        ConfigError::Invalid { key, message: msg }
    })?;
    cfg.resolve()
}

pub fn load_config(path: &Path) -> Result<StageConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("  \n").unwrap(), StageConfig::default());
        assert_eq!(parse_config("{}").unwrap(), StageConfig::default());
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = parse_config(r#"{"p_real": 1.5}"#).unwrap_err();
        assert_eq!(e.key(), Some("p_real"));
        assert!(e.to_string().contains("p_real"));
        let e = parse_config(r#"{"lr": "fast"}"#).unwrap_err();
        assert_eq!(e.key(), Some("lr"));
        let e = parse_config(r#"{"bogus": 1}"#).unwrap_err();
        assert_eq!(e.key(), Some("bogus"));
        let e = parse_config(r#"{"model": {"dit": {"depth": 3}}}"#).unwrap_err();
        assert_eq!(e.key(), Some("model.dit.depth"));
    }

    #[test]
    fn preset_sets_p_real() {
        let c = parse_config(r#"{"preset": "99real"}"#).unwrap();
        assert_eq!(c.p_real, 0.99);
        assert_eq!(c.mixture().label(), Some("99real"));
        assert_eq!(parse_config(r#"{"preset": "70real"}"#).unwrap_err().key(), Some("preset"));
    }

    #[test]
    fn hash_ignores_step_budget() {
        let a = StageConfig::default();
        let b = StageConfig {
            steps: 7,
            ..a.clone()
        };
        let c = StageConfig { seed: 1, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
