//! Layered configuration: built-in defaults, then an optional named preset
//! or TOML file, then `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffusion::DenoiserTrainConfig;
use crate::engine::ExplainConfig;
use crate::error::{Error, Result};
use crate::metrics::EvaluationOptions;
use crate::zoo::synthetic::SyntheticConfig;
use crate::zoo::{ClassifierTrainConfig, EncoderTrainConfig};

/// Every tunable of the toolkit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub explain: ExplainConfig,
    pub denoiser: DenoiserTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub encoder: EncoderTrainConfig,
    pub evaluation: EvaluationOptions,
    pub dataset: SyntheticConfig,
}

pub const PRESETS: [(&str, &str); 3] = [
    ("celeba-like", include_str!("../presets/celeba-like.toml")),
    ("bdd-like", include_str!("../presets/bdd-like.toml")),
    ("desk", include_str!("../presets/desk.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

fn toml_to_json(text: &str, origin: &str) -> Result<Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))?;
    Ok(serde_json::to_value(table)?)
}

/// Recursively overlays `top` onto `base`.
pub fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                overlay(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Keys of `value` absent from `reference`, as dotted paths.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        for (k, child) in v {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rc) => unknown_keys(child, rc, &path, out),
                None => out.push(format!("unknown key `{path}`")),
            }
        }
    }
}

fn parse_override(item: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override `{item}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"])?,
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

/// Where the settings come from, lowest precedence first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingsSource {
    pub preset: Option<String>,
    /// TOML document text and a label for error messages.
    pub file: Option<(String, String)>,
    pub overrides: Vec<String>,
}

impl SettingsSource {
    /// Resolves the layers into validated settings, reporting every
    /// problem found rather than the first.
    pub fn resolve(&self) -> Result<Settings> {
        let defaults = serde_json::to_value(Settings::default())?;
        let mut merged = defaults.clone();
        let mut problems = Vec::new();
        if let Some(name) = &self.preset {
            match PRESETS.iter().find(|(n, _)| n == name) {
                Some((_, text)) => overlay(&mut merged, toml_to_json(text, name)?),
                None => problems.push(format!(
                    "unknown preset `{name}` ({})",
                    preset_names().collect::<Vec<_>>().join(", ")
                )),
            }
        }
        if let Some((label, text)) = &self.file {
            match toml_to_json(text, label) {
                Ok(v) => overlay(&mut merged, v),
                Err(e) => problems.push(e.to_string()),
            }
        }
        for item in &self.overrides {
            match parse_override(item) {
                Ok((path, value)) => overlay(&mut merged, nest(&path, value)),
                Err(e) => problems.push(e.to_string()),
            }
        }
        unknown_keys(&merged, &defaults, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        let mut settings = Settings::default();
        if let Value::Object(sections) = &merged {
            let mut typed = Map::new();
            for (name, section) in sections {
                let mut one = Map::new();
                one.insert(name.clone(), section.clone());
                match serde_json::from_value::<Settings>(Value::Object(one)) {
                    Ok(_) => {
                        typed.insert(name.clone(), section.clone());
                    }
                    Err(e) => problems.push(format!("{name}: {e}")),
                }
            }
            if problems.is_empty() {
                settings = serde_json::from_value(Value::Object(typed))?;
            }
        }
        if problems.is_empty() {
            problems.extend(settings.problems());
        }
        if problems.is_empty() {
            Ok(settings)
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Applies a partial JSON document of explanation settings on top of
/// `base`, reporting unknown keys and invalid values together.
pub fn explain_with(base: &ExplainConfig, partial: &Value) -> Result<ExplainConfig> {
    let reference = serde_json::to_value(ExplainConfig::default())?;
    let mut merged = serde_json::to_value(base)?;
    if !partial.is_null() {
        overlay(&mut merged, partial.clone());
    }
    let mut problems = Vec::new();
    unknown_keys(&merged, &reference, "", &mut problems);
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let config: ExplainConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
    let problems = config.problems();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(Error::config(problems.join("; ")))
    }
}

impl Settings {
    pub fn problems(&self) -> Vec<String> {
        let mut problems = self.explain.problems();
        problems.extend(self.denoiser.validate().into_iter().map(|p| format!("denoiser.{p}")));
        let c = &self.classifier;
        if c.epochs == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0) {
            problems.push("classifier.epochs, batch_size and learning_rate must be positive".into());
        }
        let e = &self.evaluation;
        if e.cout_steps == 0 || e.sfid_splits == 0 {
            problems.push("evaluation.cout_steps and sfid_splits must be positive".into());
        }
        if self.dataset.train + self.dataset.test == 0 {
            problems.push("dataset must hold at least one image".into());
        }
        problems
    }

    /// TOML rendering of the effective settings.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }
}
