//! Run configuration layered as defaults < preset < file < flags.

use std::path::Path;

use ftvp_core::network::NetConfig;
use ftvp_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, IoContext, Result};

pub const PRESETS: [&str; 2] = ["desk", "paper-kitti"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Named base layer the file and flags are applied on.
    pub preset: Option<String>,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let net = NetConfig::preset(name)
            .map_err(|_| AppError::config(format!("unknown preset `{name}`; known presets: {}", PRESETS.join(", "))))?;
        Ok(Self { preset: Some(name.to_string()), net, train: TrainConfig::default() })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Command-line overrides, applied last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub lambda_cycle: Option<f64>,
}

/// Resolved config plus the keys the file set explicitly.
#[derive(Clone, Debug)]
pub struct Layered {
    pub config: RunConfig,
    file: toml::Table,
}

impl Layered {
    /// Whether the config file set `section.key`.
    pub fn file_sets(&self, section: &str, key: &str) -> bool {
        self.file.get(section).and_then(|s| s.as_table()).is_some_and(|t| t.contains_key(key))
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn parse_toml(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| AppError::config(format!("{origin}: {e}")))
}

pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Layered> {
    let table = match file {
        Some(p) => parse_toml(&std::fs::read_to_string(p).at(p)?, &p.display().to_string())?,
        None => toml::Table::new(),
    };
    resolve_table(table, file.map_or("defaults".into(), |p| p.display().to_string()), flags)
}

pub fn resolve_table(table: toml::Table, origin: String, flags: &Overrides) -> Result<Layered> {
    let file_preset = match table.get("preset") {
        Some(toml::Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(AppError::config(format!("{origin}: preset must be a string, found {other}"))),
        None => None,
    };
    let name = flags.preset.clone().or(file_preset).unwrap_or_else(|| "desk".into());
    let base = RunConfig::preset(&name)?;
    let mut merged = match toml::Value::try_from(&base).map_err(|e| AppError::config(e.to_string()))? {
        toml::Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    merge(&mut merged, &table);
    merged.insert("preset".into(), toml::Value::String(name));
    let mut config: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| AppError::config(format!("{origin}: {}", e.message())))?;
    let f = flags;
    if let Some(v) = f.seed {
        config.train.seed = v;
    }
    if let Some(v) = f.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = f.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = f.lr0 {
        config.train.lr0 = v;
    }
    if let Some(v) = f.lambda_cycle {
        config.net.lambda_cycle = v;
    }
    config.validate().map_err(|e| AppError::config(format!("{origin}: {e}")))?;
    Ok(Layered { config, file: table })
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
