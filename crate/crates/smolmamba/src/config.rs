//! Run configuration: a TOML document merged with `key=value` overrides.
//! Every field has a default; unknown keys are a hard error so typos
//! cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetDescriptor;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{key}`")]
    UnknownKey { key: String },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("configuration parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    BadOverride(String),
}

/// Everything one command run needs. `seed` drives parameter
/// initialization; the training seed lives in `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetDescriptor,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetDescriptor::default(),
            out_dir: PathBuf::from("out"),
            seed: 42,
        }
    }
}

impl RunConfig {
    /// The model and dataset sections describe the same tensors; catch
    /// drift before it turns into shape errors deep in a run.
    pub fn check_consistency(&self) -> Result<(), ConfigError> {
        let (hw, ch, classes) = match self.dataset.kind {
            crate::data::DatasetKind::Synthetic => {
                (self.dataset.grid, 1, self.dataset.classes)
            }
            crate::data::DatasetKind::Cifar10 => (32, 3, 10),
        };
        let complain = |what: &str, model: usize, data: usize| {
            Err(ConfigError::TypeMismatch(format!(
                "model.{what} = {model} does not match the dataset ({data})"
            )))
        };
        if self.model.input_hw != hw {
            return complain("input_hw", self.model.input_hw, hw);
        }
        if self.model.in_channels != ch {
            return complain("in_channels", self.model.in_channels, ch);
        }
        if self.model.num_classes != classes {
            return complain("num_classes", self.model.num_classes, classes);
        }
        if self.dataset.kind == crate::data::DatasetKind::Synthetic
            && self.model.timesteps != self.dataset.timesteps
        {
            return complain("timesteps", self.model.timesteps, self.dataset.timesteps);
        }
        Ok(())
    }
}

fn classify_toml_error(msg: String) -> ConfigError {
    if let Some(start) = msg.find("unknown field `") {
        let rest = &msg[start + "unknown field `".len()..];
        if let Some(end) = rest.find('`') {
            return ConfigError::UnknownKey {
                key: rest[..end].to_string(),
            };
        }
    }
    if msg.contains("invalid type") || msg.contains("expected") {
        return ConfigError::TypeMismatch(msg);
    }
    ConfigError::Parse(msg)
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Try the native TOML reading first; fall back to a plain string so
    // values like bare paths work without quoting.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                ConfigError::TypeMismatch(format!("`{part}` in `{key}` is not a table"))
            })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load a config file (optional), apply `key=value` overrides, and
/// deserialize strictly. Overrides use dotted paths, e.g.
/// `model.depth=2` or `train.base_lr=5e-4`.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|_| ConfigError::MissingFile(p.to_path_buf()))?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| classify_toml_error(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
        apply_override(&mut table, key.trim(), parse_override_value(raw.trim()))?;
    }
    let value = toml::Value::Table(table);
    value
        .try_into()
        .map_err(|e: toml::de::Error| classify_toml_error(e.to_string()))
}

/// Pretty TOML of the fully resolved configuration, echoed into the
/// output directory for provenance.
pub fn resolved_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_yields_defaults() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.check_consistency().unwrap();
    }

    #[test]
    fn override_wins_over_default() {
        let cfg = parse_config(None, &["model.depth=3".to_string()]).unwrap();
        assert_eq!(cfg.model.depth, 3);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = parse_config(None, &["model.dept=2".to_string()]).unwrap_err();
        match err {
            ConfigError::UnknownKey { key } => assert_eq!(key, "dept"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatch_is_reported() {
        let err = parse_config(None, &["model.depth=\"two\"".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::TypeMismatch(_)));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = parse_config(Some(Path::new("/nonexistent/cfg.toml")), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)));
    }

    #[test]
    fn file_then_override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[model]\ndepth = 5\ndim = 32\n").unwrap();
        let cfg = parse_config(Some(&path), &["model.depth=7".to_string()]).unwrap();
        assert_eq!(cfg.model.depth, 7);
        assert_eq!(cfg.model.dim, 32);
    }

    #[test]
    fn resolved_toml_roundtrips() {
        let cfg = parse_config(None, &["train.epochs=3".to_string()]).unwrap();
        let text = resolved_toml(&cfg);
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
