//! Run configuration: one TOML document with `dataset`, `model` and `train`
//! tables, plus `key.path=value` command-line overrides.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::network::FunConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding a generated dataset (manifest and scene files).
    pub data_dir: String,
    pub dataset: DatasetSpec,
    pub model: FunConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            dataset: DatasetSpec::default(),
            model: FunConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate; unknown keys anywhere are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `text` after applying `key.path=value` overrides. Values are read
    /// as TOML literals and fall back to plain strings.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        let scene = &self.dataset.scene;
        if scene.bands != self.model.bands || scene.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} bands / {} classes but the model expects {} / {}",
                scene.bands, scene.num_classes, self.model.bands, self.model.num_classes
            )));
        }
        if self.train.crop > scene.height.min(scene.width) {
            return Err(Error::Config(format!(
                "crop {} exceeds the {}x{} scenes",
                self.train.crop, scene.height, scene.width
            )));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
