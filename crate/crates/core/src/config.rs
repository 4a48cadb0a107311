//! Run configuration: a TOML file with one table per module, plus dotted-key
//! overrides such as `train.epochs=5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::datagen::SynthSpec;
use crate::embedding::HpeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{FusionWeights, ScoreConfig};
use crate::optim::AdamWConfig;
use crate::pool::Metric;
use crate::transformer::{Ablation, AttentionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `tiny` or `wide-residual-50-style`.
    pub name: String,
    pub input_size: usize,
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
    /// Only `true` is supported.
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "tiny".into(),
            input_size: 256,
            seed: 7,
            weights_path: None,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn spec(&self) -> Result<BackboneSpec> {
        if !self.frozen {
            return Err(Error::config(
                "backbone.frozen = false is not supported; the extractor is never trained",
            ));
        }
        let mut spec = BackboneSpec::builtin(&self.name, self.input_size)?;
        spec.seed = self.seed;
        spec.weights_path = self.weights_path.clone();
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::config(
                "train.learning_rate must be positive; weight_decay and grad_clip non-negative",
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub metric: Metric,
    pub normalize_codings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub hpe: HpeConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionWeights,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub pool: PoolConfig,
    pub score: ScoreConfig,
    pub synth: SynthSpec,
}

/// Parses `key.path=value`; the value is read as a TOML literal and falls
/// back to a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{text}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!(
            "override key `{key}` has an empty segment"
        )));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path crosses non-table key `{p}`")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `overrides` (`a.b=value`) on top and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.normalized()
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Load {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the token width into the embedding section and validates.
    pub fn normalized(mut self) -> Result<Self> {
        self.hpe.hidden_dim = self.attention.hidden_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.spec()?;
        self.attention.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.hpe.noise_std < 0.0 || !self.hpe.noise_std.is_finite() {
            return Err(Error::config("hpe.noise_std must be non-negative"));
        }
        if !(self.score.smoothing_sigma >= 0.0) {
            return Err(Error::config("score.smoothing_sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hpe: self.hpe.clone(),
            attention: self.attention.clone(),
            ablation: self.ablation,
        }
    }

    /// Hash of everything that shapes a training run. `train.epochs` and
    /// `train.checkpoint_every` are excluded so a finished run can be
    /// extended; `score` and `synth` do not affect training.
    pub fn train_hash(&self) -> String {
        let mut snapshot = serde_json::to_value(self).expect("config serializes");
        let obj = snapshot.as_object_mut().unwrap();
        obj.remove("score");
        obj.remove("synth");
        let train = obj
            .get_mut("train")
            .and_then(|t| t.as_object_mut())
            .unwrap();
        train.remove("epochs");
        train.remove("checkpoint_every");
        let bytes = serde_json::to_vec(&snapshot).expect("json");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.attention.blocks, 4);
        assert_eq!(c.attention.semantic_tokens, 40);
        assert_eq!(c.backbone.input_size, 256);
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[train]\nepochs = 3\n[attention]\nhidden_dim = 16\nheads = 4\n";
        let c = Config::from_toml_with_overrides(
            text,
            &["train.epochs=7".into(), "pool.metric=cosine".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.pool.metric, Metric::Cosine);
        assert_eq!(c.hpe.hidden_dim, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[train]\nepoch = 3\n").is_err());
        assert!(Config::from_toml_with_overrides("", &["nope.x=1".into()]).is_err());
        assert!(Config::from_toml_with_overrides("", &["train.epochs".into()]).is_err());
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        assert!(Config::from_toml_str("[backbone]\nfrozen = false\n").is_err());
    }

    #[test]
    fn hash_ignores_epochs_only() {
        let a = Config::default();
        let mut b = a.clone();
        b.train.epochs = 1;
        assert_eq!(a.train_hash(), b.train_hash());
        b.train.learning_rate = 1e-3;
        assert_ne!(a.train_hash(), b.train_hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = Config::default();
        c.ablation.disable_cscd = true;
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c.normalized().unwrap());
    }
}
