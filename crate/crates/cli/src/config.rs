//! Layered configuration: built-in defaults, an optional preset, a JSON
//! file, then dotted `key=value` overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sfmeta::envs::{mixture, EnvConfig, MixtureEntry, TaskFamily};
use sfmeta::theory::TheoryConfig;
use sfmeta::trainer::TrainConfig;

/// A problem with what the user asked for; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureShares {
    pub expert: f64,
    pub medium: f64,
    pub random: f64,
}

impl Default for MixtureShares {
    fn default() -> Self {
        Self {
            expert: 0.4,
            medium: 0.4,
            random: 0.2,
        }
    }
}

impl MixtureShares {
    pub fn entries(&self) -> Vec<MixtureEntry> {
        mixture(self.expert, self.medium, self.random)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub family: TaskFamily,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub mixture: MixtureShares,
    pub env: EnvConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::PointRobot,
            train_tasks: 8,
            test_tasks: 2,
            trajectories: 50,
            seed: 0,
            mixture: MixtureShares::default(),
            env: EnvConfig {
                max_path_length: 100,
                ..EnvConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub x: String,
    pub y: String,
    /// Trailing moving-average window; 1 plots raw values.
    pub window: usize,
    pub title: String,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            x: "g".into(),
            y: "test_return".into(),
            window: 1,
            title: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: DataConfig,
    pub trainer: TrainConfig,
    pub theory: TheoryConfig,
    pub plot: PlotConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            trainer: TrainConfig::desk(),
            theory: TheoryConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

impl Settings {
    /// Defaults under `preset` (`desk` or `full-scale`). The data horizon follows
    /// the trainer's so collected episodes match evaluation rollouts.
    pub fn for_preset(preset: &str) -> anyhow::Result<Self> {
        let trainer = TrainConfig::preset(preset).map_err(|e| usage(e.to_string()))?;
        let mut s = Settings::default();
        s.data.env.max_path_length = trainer.max_path_length;
        s.trainer = trainer;
        Ok(s)
    }

    /// `key = default` for every resolvable key, one per line.
    pub fn key_listing() -> String {
        let value = serde_json::to_value(Settings::default()).expect("settings serialize");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.join("\n")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> anyhow::Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(usage(format!("unknown config key '{key}'"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parse `a.b.c=value` into a nested object. Values are read as JSON when
/// they parse and as plain strings otherwise, so `family=point-robot` works.
pub fn override_value(spec: &str) -> anyhow::Result<Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("override '{spec}' has an empty key segment")));
    }
    let leaf = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    Ok(key.rsplit('.').fold(leaf, |acc, part| {
        let mut m = Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    }))
}

/// Defaults (or `preset`), overlaid by `file`, overlaid by `overrides`.
pub fn resolve(file: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> anyhow::Result<Settings> {
    let base = match preset {
        Some(p) => Settings::for_preset(p)?,
        None => Settings::default(),
    };
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut value, overlay, "")?;
    }
    for spec in overrides {
        merge(&mut value, override_value(spec)?, "")?;
    }
    serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))
}
