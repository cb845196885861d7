//! Run configuration: one TOML file plus `--section.key value` overrides.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Keys are addressed flat (`train.epochs`, `lca.weighting`, ...); any key
//! not listed in [`RunConfig::default`] is rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSwitches;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::lca::LcaConfig;
use crate::losses::LossConfig;
use crate::pipeline::{ModelConfig, NegativeMode, TrainConfig};

pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub pseudo_fraction: f64,
    pub negatives: NegativeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub augment: AugmentSwitches,
    pub loss: LossConfig,
    pub lca: LcaConfig,
    pub backbone: BackboneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            train: TrainSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                momentum: t.momentum,
                seed: t.seed,
                pseudo_fraction: t.pseudo_fraction,
                negatives: t.negatives,
            },
            augment: t.augment,
            loss: t.loss,
            lca: LcaConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

type Flat = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &Flat) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().unwrap_or_default();
        for p in parts {
            node = node
                .entry(p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("section keys never collide with leaves");
        }
        node.insert(leaf.to_string(), v.clone());
    }
    root
}

/// Interprets a command-line value as a TOML literal, falling back to a
/// bare string (so `--lca.weighting per-size` works without quotes).
fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    fn defaults_flat() -> Flat {
        let table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut flat = Flat::new();
        flatten("", &table, &mut flat);
        flat
    }

    /// All keys with their default values, in sorted order.
    pub fn default_keys() -> Vec<(String, String)> {
        Self::defaults_flat()
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect()
    }

    /// Builds a configuration from optional file text and `(key, value)`
    /// overrides applied in order.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut flat = Self::defaults_flat();
        let mut set = |key: &str, value: toml::Value| -> Result<()> {
            match flat.get_mut(key) {
                Some(slot) => {
                    *slot = value;
                    Ok(())
                }
                None => Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        };
        if let Some(text) = file_text {
            let table: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
            let mut given = Flat::new();
            flatten("", &table, &mut given);
            for (k, v) in given {
                set(&k, v)?;
            }
        }
        for (k, raw) in overrides {
            set(k, parse_override(raw))?;
        }
        let cfg: RunConfig = unflatten(&flat)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train_config().validate_teacher()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            seed: self.train.seed,
            loss: self.loss,
            pseudo_fraction: self.train.pseudo_fraction,
            augment: self.augment,
            negatives: self.train.negatives,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            lca: self.lca,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration as `config.resolved` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
