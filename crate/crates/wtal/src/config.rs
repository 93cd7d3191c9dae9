//! TOML run configuration with `key=value` overrides, canonical JSON
//! serialization and the SHA-256 config hash.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use wtal_core::data::Config;
use wtal_core::synth::SynthSpec;

use crate::error::{read, Result, WtalError};

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| WtalError::Usage(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(WtalError::Usage(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| WtalError::Usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Resolve an optional TOML file plus overrides into `T`.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match file {
        Some(path) => {
            let bytes = read(path)?;
            let text = String::from_utf8(bytes).map_err(|e| WtalError::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| WtalError::Usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| WtalError::Usage(format!("invalid configuration: {e}")))
}

pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let cfg: Config = resolve(file, overrides)?;
    cfg.validate().map_err(|e| WtalError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn load_synth_spec(file: Option<&Path>, overrides: &[String]) -> Result<SynthSpec> {
    let spec: SynthSpec = resolve(file, overrides)?;
    spec.validate().map_err(|e| WtalError::Usage(e.to_string()))?;
    Ok(spec)
}

/// Sorted-key compact JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json maps are ordered by key, so going through `Value` sorts them
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn config_hash(cfg: &Config) -> String {
    hex::encode(Sha256::digest(canonical_json(cfg).as_bytes()))
}
