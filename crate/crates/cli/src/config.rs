//! Experiment config loading: defaults, then a flat TOML file, then flags.

use std::fmt;
use std::path::Path;

use anyhow::Result;
use loki_core::harness::ExperimentConfig;
use toml::{Table, Value};

/// A problem the user fixes by editing a file or a flag (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

/// Reads a flat `key = value` file. Nested tables are rejected.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    let table: Table = text
        .parse()
        .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(usage(format!(
            "config file {}: `{key}` is a section; config files are flat",
            path.display()
        )));
    }
    Ok(table)
}

/// Parses `value` as a TOML scalar, falling back to a bare string.
pub fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Splits a `key=value` override.
pub fn parse_assignment(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{raw}` is not key=value")))?;
    Ok((key.trim().to_string(), parse_value(value.trim())))
}

/// Layers `file` and `overrides` over the defaults and type-checks the result.
pub fn build(file: Option<&Path>, overrides: Vec<(String, Value)>) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(path) => read_table(path)?,
        None => Table::new(),
    };
    for (key, value) in overrides {
        table.insert(key, value);
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("invalid config: {}", e.message())))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_with_types() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("loki"), Value::String("loki".into()));
        assert_eq!(parse_value("\"a b\""), Value::String("a b".into()));
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 4\nq = 20\n").unwrap();
        let cfg = build(Some(&path), vec![parse_assignment("q=5").unwrap()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.q, 5.0);
        assert_eq!(cfg.d_model, ExperimentConfig::default().d_model);
    }

    #[test]
    fn shipped_reference_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
        let cfg = build(Some(&path), Vec::new()).unwrap();
        assert_eq!((cfg.d_model, cfg.d_ff, cfg.epochs), (64, 128, 20));
        assert!(cfg.multiply_by_activation);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = build(None, vec![parse_assignment("learning_rate=0.1").unwrap()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[model]\nd_model = 8\n").unwrap();
        assert!(build(Some(&path), vec![]).is_err());
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = ExperimentConfig {
            max_steps: Some(7),
            ..ExperimentConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let table: Table = text.parse().unwrap();
        let back: ExperimentConfig = Value::Table(table).try_into().unwrap();
        assert_eq!(back, cfg);
    }
}
