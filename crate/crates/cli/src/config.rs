//! One TOML file with dotted keys, plus `--section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use setclust::data::GeneratorSpec;
use setclust::model::{MetricConfig, ModelConfig};
use setclust::train::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

const SECTIONS: [&str; 4] = ["model", "train", "data", "metric"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorSpec,
    /// Mirrors `model.metric`; a `[metric]` section takes precedence.
    pub metric: MetricConfig,
}

/// A resolved configuration and the dotted keys the user set explicitly.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub table: Table,
}

impl Loaded {
    pub fn is_set(&self, dotted: &str) -> bool {
        let mut node = &self.table;
        let parts: Vec<&str> = dotted.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            match node.get(*part) {
                Some(Value::Table(t)) if i + 1 < parts.len() => node = t,
                Some(_) => return i + 1 == parts.len(),
                None => return false,
            }
        }
        false
    }
}

/// True for `--section.key=value` arguments.
pub fn is_override(arg: &str) -> bool {
    let Some(body) = arg.strip_prefix("--") else {
        return false;
    };
    let Some((key, _)) = body.split_once('=') else {
        return false;
    };
    key.split_once('.').is_some_and(|(section, _)| SECTIONS.contains(&section))
}

/// Parses the value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert(table: &mut Table, dotted: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(dotted, "malformed key"));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::config(dotted, "parent key is not a table")),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reports the first key in `user` with no counterpart in `reference`.
fn unknown_key(user: &Table, reference: &Table, prefix: &str) -> Option<String> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, reference.get(key)) {
            (_, None) => return Some(path),
            (Value::Table(u), Some(Value::Table(r))) => {
                if let Some(bad) = unknown_key(u, r, &path) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(setclust::Error::from)?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for arg in overrides {
        let (key, raw) = arg[2..].split_once('=').expect("checked by is_override");
        insert(&mut table, key, parse_value(raw))?;
    }

    let reference = Table::try_from(RunConfig::default()).expect("default config serializes");
    if let Some(bad) = unknown_key(&table, &reference, "") {
        return Err(CliError::config(&bad, "unknown key"));
    }
    let mut config: RunConfig = table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;

    let loaded_metric = table.contains_key("metric");
    if loaded_metric {
        config.model.metric = config.metric;
    }
    if config.model.metric.mode.is_active() && config.model.metric.set_size == 0 {
        config.model.metric.set_size = config.train.set_size;
    }
    config.metric = config.model.metric;

    let mut loaded = Loaded { config, table };
    let (model_k, data_k) = (loaded.is_set("model.k_max"), loaded.is_set("data.k_max"));
    let c = &mut loaded.config;
    match (model_k, data_k) {
        (true, false) => c.data.k_max = c.model.k_max,
        (false, true) => c.model.k_max = c.data.k_max,
        _ => {}
    }
    if c.data.k_max != c.model.k_max {
        return Err(CliError::config(
            "data.k_max",
            &format!("{} differs from model.k_max = {}", c.data.k_max, c.model.k_max),
        ));
    }
    c.model.validate()?;
    c.train.validate()?;
    c.data.validate()?;
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use setclust::metric::MetricMode;

    fn overrides(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_detection() {
        assert!(is_override("--train.steps=0"));
        assert!(is_override("--data.families=[\"moons\"]"));
        assert!(!is_override("--config=x.toml"));
        assert!(!is_override("--train.steps"));
        assert!(!is_override("--foo.bar=1"));
    }

    #[test]
    fn values_parse_as_toml_or_string() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("full"), Value::String("full".into()));
        assert_eq!(parse_value("\"full\""), Value::String("full".into()));
    }

    #[test]
    fn defaults_load() {
        let l = load(None, &[]).unwrap();
        assert_eq!(l.config, RunConfig::default());
    }

    #[test]
    fn dotted_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model.k_max = 3\ntrain.steps = 10\n[metric]\nmode = \"full\"\n").unwrap();
        let l = load(Some(&path), &overrides(&["--train.steps=4", "--train.set_size=12"])).unwrap();
        assert_eq!(l.config.model.k_max, 3);
        assert_eq!(l.config.data.k_max, 3);
        assert_eq!(l.config.train.steps, 4);
        assert_eq!(l.config.model.metric.mode, MetricMode::Full);
        assert_eq!(l.config.model.metric.set_size, 12);
        assert!(l.is_set("model.k_max"));
        assert!(!l.is_set("data.k_max"));
    }

    #[test]
    fn errors_name_the_key() {
        let err = load(None, &overrides(&["--train.stepz=4"])).unwrap_err();
        assert!(err.to_string().contains("train.stepz"), "{err}");
        let err = load(None, &overrides(&["--train.batch_sets=0"])).unwrap_err();
        assert!(err.to_string().contains("train.batch_sets"), "{err}");
        let err = load(None, &overrides(&["--model.k_max=3", "--data.k_max=4"])).unwrap_err();
        assert!(err.to_string().contains("data.k_max"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn shipped_presets_load() {
        for name in ["desk.toml", "full.toml"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
            let l = load(Some(&path), &[]).unwrap();
            assert_eq!(l.config.model.k_max, l.config.data.k_max);
        }
    }
}
