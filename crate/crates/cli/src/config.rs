//! Run-configuration resolution: defaults, then a JSON config file, then
//! command-line flags, strongest last. The resolved configuration is
//! serialized next to every command's outputs so runs can be reproduced
//! from the emitted file alone.

use std::path::Path;

use cxrlab_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Seed precedence: flag, then config file, then DDB_SEED, then 42.
pub fn resolve_seed(flag: Option<u64>, file_value: Option<u64>) -> u64 {
    flag.or(file_value)
        .or_else(|| std::env::var("DDB_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(42)
}

fn merge_value(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlay a partial JSON config file onto a defaults struct.
pub fn overlay_file<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(defaults) };
    let text = std::fs::read_to_string(path)?;
    let overlay: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    if !overlay.is_object() {
        return Err(Error::Config(format!(
            "config file {} must contain a JSON object",
            path.display()
        )));
    }
    let mut value = serde_json::to_value(&defaults)?;
    merge_value(&mut value, overlay);
    serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
}

/// Extract a top-level u64 from a config file (for seed precedence).
pub fn file_u64(path: Option<&Path>, key: &str) -> Option<u64> {
    let text = std::fs::read_to_string(path?).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get(key)?.as_u64()
}

/// Persist the resolved configuration as pretty JSON.
pub fn write_resolved<T: Serialize>(cfg: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Locate a manifest: either the CSV itself or a directory containing
/// `manifest.csv`.
pub fn manifest_path(data: &Path) -> Result<std::path::PathBuf> {
    if data.is_dir() {
        let candidate = data.join("manifest.csv");
        if candidate.is_file() {
            return Ok(candidate);
        }
        return Err(Error::Config(format!(
            "{} does not contain a manifest.csv",
            data.display()
        )));
    }
    if data.is_file() {
        return Ok(data.to_path_buf());
    }
    Err(Error::Config(format!("data path {} not found", data.display())))
}

/// Parse a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::Config(format!("cannot parse '{p}' in {what} list")))
        })
        .collect()
}
