//! TOML experiment configs with dotted-path overrides.

use std::path::Path;

use snopt_core::trainer::ExperimentConfig;
use toml::{Table, Value};

use crate::CliError;

/// Parses `key=value` into a path and a TOML value. Values that are not
/// valid TOML literals (e.g. `adam`) are taken as strings.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{} is not a section", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Builds a config from TOML text plus overrides; unknown keys are errors.
pub fn config_from_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table: Table = text.parse().map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        set_path(&mut table, &path, value)?;
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {}", e.message())))?;
    Ok(cfg)
}

/// Reads the file, applies overrides and `SNOPT_SEED`, then validates.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = config_from_str(&text, overrides)?;
    cfg.apply_seed_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// The fully resolved config as TOML, for documentation and `init`.
pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
