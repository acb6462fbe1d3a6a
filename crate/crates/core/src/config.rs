//! Run configuration: presets, TOML/JSON files and `section.key=value`
//! overrides.
//!
//! Loading starts from the preset named in the file (default `desk`),
//! merges the file's keys over it, then applies overrides in order.
//! Unknown keys anywhere are an error naming the key.
//!
//! ```toml
//! preset = "desk"
//! seed = 7
//!
//! [world]
//! class_separation = 4.0
//!
//! [loss]
//! lambda1 = 0.5
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synthdata::{AugmentConfig, WorldConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small runs that finish in minutes on one core.
    #[default]
    Desk,
    /// Epoch count and batch size of the reference setup.
    Paper,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Desk => RunConfig {
                preset: self,
                seed: 0,
                world: WorldConfig::default(),
                augment: AugmentConfig::default(),
                model: ModelConfig::default(),
                train: TrainConfig::desk(),
                loss: LossWeights::default(),
            },
            Preset::Paper => RunConfig {
                preset: self,
                train: TrainConfig::paper(),
                ..Preset::Desk.config()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Root seed; world generation and training derive their streams from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::Desk.config()
    }
}

impl RunConfig {
    /// World settings with the root seed applied.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Parses TOML text. See the module docs for the merge order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(user, overrides)
    }

    /// Parses JSON text: either a config object or a run summary, whose
    /// `config` field is used.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        match json_to_toml(v) {
            Some(toml::Value::Table(t)) => Self::from_table(t, overrides),
            _ => Err(Error::Config("JSON config must be an object".into())),
        }
    }

    /// Loads a `.json` or TOML file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text, overrides)
        } else {
            Self::from_toml_str(&text, overrides)
        };
        cfg.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Preset defaults with only `overrides` applied.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_table(toml::Table::new(), overrides)
    }

    fn from_table(mut user: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::Config(format!("unknown preset {v} (expected \"desk\" or \"paper\")")))?,
        };
        let base = toml::Table::try_from(preset.config()).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, user);
        // Re-parse from text so serde reports unknown keys with their path.
        let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                let merged = merge(std::mem::take(b), u);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// `section.key=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = path.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn json_to_toml(v: serde_json::Value) -> Option<toml::Value> {
    use serde_json::Value as J;
    Some(match v {
        J::Null => return None,
        J::Bool(b) => toml::Value::Boolean(b),
        J::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64()?),
        },
        J::String(s) => toml::Value::String(s),
        J::Array(a) => toml::Value::Array(a.into_iter().filter_map(json_to_toml).collect()),
        J::Object(o) => toml::Value::Table(o.into_iter().filter_map(|(k, v)| Some((k, json_to_toml(v)?))).collect()),
    })
}
