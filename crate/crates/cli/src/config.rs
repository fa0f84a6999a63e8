//! Run configuration: nested sections addressed with flat dotted keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ctxslt::corpus::GeneratorConfig;
use ctxslt::model::{ModelConfig, StreamSet};
use ctxslt::spotting::SpotParams;
use ctxslt::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory holding `train.jsonl`, `dev.jsonl` and optionally
    /// `test.jsonl`. When unset, a corpus is generated from `generator.*`.
    pub dir: Option<PathBuf>,
    /// Spotting TSV replacing the spottings listed in the manifests.
    pub spottings: Option<PathBuf>,
}

/// Model hyperparameters; vocabulary size and feature width come from the
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub streams: StreamSet,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            d_ff: m.d_ff,
            layers: m.layers,
            heads: m.heads,
            dropout: m.dropout,
            max_positions: m.max_positions,
            streams: m.streams,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            vocab_size,
            max_positions: self.max_positions,
            feature_dim,
            streams: self.streams,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives corpus generation, model initialisation and training.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub spotting: SpotParams,
    pub ablation: AblationSection,
}

pub const PRESETS: [&str; 4] = ["homonym-small", "overfit-32", "srf-like", "bobsl-like"];

/// Small models trained on the synthetic homonym corpus.
fn small_model(d_model: usize) -> ModelSection {
    ModelSection {
        d_model,
        d_ff: 2 * d_model,
        layers: 1,
        heads: 4,
        dropout: 0.1,
        max_positions: 512,
        streams: StreamSet::ALL,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let base = RunConfig::default();
        let cfg = match name {
            "homonym-small" => RunConfig {
                seed: 1,
                generator: GeneratorConfig {
                    noise_sigma: 0.5,
                    topics: 2,
                    train_episodes: 200,
                    dev_episodes: 40,
                    ..GeneratorConfig::default()
                },
                model: small_model(32),
                train: TrainConfig {
                    lr0: 2e-3,
                    batch_size: 16,
                    max_epochs: 100,
                    max_decode_len: 16,
                    ..TrainConfig::default()
                },
                ..base
            },
            "overfit-32" => RunConfig {
                seed: 1,
                generator: GeneratorConfig {
                    train_episodes: 4,
                    dev_episodes: 1,
                    test_episodes: 0,
                    sentences_per_episode: 8,
                    ..GeneratorConfig::default()
                },
                model: ModelSection {
                    dropout: 0.0,
                    ..small_model(64)
                },
                train: TrainConfig {
                    lr0: 1e-3,
                    batch_size: 8,
                    max_epochs: 500,
                    max_decode_len: 16,
                    stop_at_train_accuracy: Some(0.99),
                    ..TrainConfig::default()
                },
                ..base
            },
            "srf-like" => RunConfig {
                train: TrainConfig {
                    lr0: 3e-4,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
                ..base
            },
            "bobsl-like" => RunConfig {
                train: TrainConfig {
                    lr0: 6e-4,
                    batch_size: 64,
                    ..TrainConfig::default()
                },
                ..base
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset {other:?}; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Every setting as `section.key` → value. `train.seed` is omitted because
    /// the top-level seed determines it.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("serializable config"), &mut out);
        out.remove("train.seed");
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, CliError> {
        let mut root = Value::Object(Map::new());
        for (key, value) in flat {
            insert(&mut root, key, value.clone())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Applies flat overrides; unknown keys are rejected.
    pub fn merge(&self, overrides: &BTreeMap<String, Value>) -> Result<Self, CliError> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            let known = flat.contains_key(k) || flat.keys().any(|f| f.starts_with(&format!("{k}.")))
                || is_optional_child(&flat, k);
            if !known {
                return Err(CliError::Config(format!("unknown configuration key {k:?}")));
            }
            // replacing a whole section drops its old children
            let prefix = format!("{k}.");
            flat.retain(|f, _| !f.starts_with(&prefix));
            flat.insert(k.clone(), v.clone());
        }
        Self::from_flat(&flat)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.train.validate()?;
        self.spotting.validate()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.to_flat()).expect("serializable config");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Keys under a tagged union (such as `train.context.max`) that the current
/// variant does not have.
fn is_optional_child(flat: &BTreeMap<String, Value>, key: &str) -> bool {
    match key.rsplit_once('.') {
        Some((parent, _)) => flat.contains_key(&format!("{parent}.kind")),
        None => false,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            _ => return Err(CliError::Config(format!("key {key:?} conflicts with a scalar setting"))),
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Reads a flat JSON object of dotted keys.
pub fn read_flat(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_flat(&text)
}

pub fn parse_flat(text: &str) -> Result<BTreeMap<String, Value>, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not a flat JSON object: {e}")))
}

/// Preset (or defaults), then the config file, then `--set` overrides, then
/// an explicit seed.
pub fn resolve(
    preset: Option<&str>,
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = file {
        cfg = cfg.merge(&read_flat(path)?)?;
    }
    let mut overrides = BTreeMap::new();
    for s in sets {
        let (k, v) = parse_override(s)?;
        overrides.insert(k, v);
    }
    cfg = cfg.merge(&overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
