//! Loading simulator configs from TOML.
//!
//! A config file only needs the keys it changes. It is merged over the
//! defaults, `--set` overrides are merged over that, and only then is the
//! result deserialized, so every key the user wrote is checked against the
//! known key set before any type errors are reported.

use std::path::Path;

use tlp_core::SimConfig;
use toml::{Table, Value};

use crate::CliError;

/// Keys accepted in a config even though the default leaves them unset.
const OPTIONAL_KEYS: &[&str] = &["page_shuffle"];

fn defaults() -> Table {
    Table::try_from(SimConfig::default()).expect("default config serializes to toml")
}

/// Collects dotted paths of keys in `user` that `known` has no slot for.
fn unknown_keys(user: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (Some(Value::Table(kt)), Value::Table(ut)) => unknown_keys(ut, kt, &path, out),
            (Some(Value::Table(_)), _) => out.push(format!("{path} must be a section")),
            (Some(_), Value::Table(_)) => out.push(format!("{path} is a value, not a section")),
            (Some(_), _) => {}
            (None, _) if prefix.is_empty() && OPTIONAL_KEYS.contains(&k.as_str()) => {}
            (None, _) => out.push(format!("unknown key {path}")),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses one `section.key=value` override into a nested table. The value
/// is read as a TOML literal, falling back to a bare string so that
/// `variant=tlp` works without quotes.
pub fn parse_override(spec: &str) -> Result<Table, CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("non-empty path");
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for k in keys.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(k.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

/// Builds a config from optional file text plus overrides, in that order.
pub fn build(file_text: Option<&str>, overrides: &[Table]) -> Result<SimConfig, CliError> {
    let known = defaults();
    let mut merged = known.clone();
    let mut problems = Vec::new();
    let mut layers = Vec::new();
    if let Some(text) = file_text {
        let t: Table = toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string()]))?;
        layers.push(t);
    }
    layers.extend(overrides.iter().cloned());
    for layer in layers {
        unknown_keys(&layer, &known, "", &mut problems);
        merge(&mut merged, layer);
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let cfg: SimConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(vec![e.message().to_string()]))?;
    cfg.validate().map_err(|tlp_core::ConfigError::Invalid(errs)| CliError::Config(errs))?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[Table]) -> Result<SimConfig, CliError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    build(text.as_deref(), overrides)
}

/// Renders a config as a complete TOML file.
pub fn render(cfg: &SimConfig) -> String {
    toml::to_string(cfg).expect("config serializes to toml")
}
