//! TOML scenario files and `key.path=value` overrides.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;

/// Default config path when `--config` is not given.
pub const CONFIG_ENV: &str = "PCCA_CONFIG";

/// Parses a scenario file. Missing keys take their defaults, unknown keys are
/// rejected with the line and column of the offending entry.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_toml(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string so `variant=vgr` works without quotes.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` assignments in order.
pub fn apply_overrides(cfg: &ScenarioConfig, overrides: &[String]) -> Result<ScenarioConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override `{item}` has an empty key segment")));
        }
        let mut node = &mut root;
        for seg in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{item}`: `{seg}` is not inside a section")))?;
            node = table.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{item}`: parent of `{key}` is not a section")))?;
        table.insert(path[path.len() - 1].to_string(), parse_value(raw));
        // Check each assignment on its own so errors name the culprit.
        root.clone()
            .try_into::<ScenarioConfig>()
            .map_err(|e| Error::Config(format!("override `{item}`: {}", e.message())))?;
    }
    let out: ScenarioConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    out.validate()?;
    Ok(out)
}
