//! Training config assembly: file, then `TACTICRAFT_` variables, then `--set`.

use std::collections::BTreeMap;

use tacticraft_core::trainer::{flatten_toml, TrainConfig, TrainError};

pub const ENV_PREFIX: &str = "TACTICRAFT_";

/// Variables read by clap directly, not config keys.
pub const RESERVED_ENV: &[&str] = &["TACTICRAFT_ENDPOINT_URL", "TACTICRAFT_API_KEY", "TACTICRAFT_LOG"];

/// `TACTICRAFT_GRAD_CLIP__THRESHOLD` names `grad_clip.threshold`.
pub fn env_key(var: &str) -> Option<String> {
    if RESERVED_ENV.contains(&var) {
        return None;
    }
    let rest = var.strip_prefix(ENV_PREFIX)?;
    (!rest.is_empty()).then(|| rest.to_ascii_lowercase().replace("__", "."))
}

/// TOML value if it parses as one, otherwise a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn parse_assignment(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not key=value"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

pub fn build(
    file_text: Option<&str>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[(String, toml::Value)],
) -> Result<(TrainConfig, BTreeMap<String, toml::Value>), TrainError> {
    let mut flat = match file_text {
        Some(text) => {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
            flatten_toml(&table)
        }
        None => BTreeMap::new(),
    };
    let mut env: Vec<(String, String)> = env.into_iter().collect();
    env.sort();
    for (var, raw) in env {
        if let Some(k) = env_key(&var) {
            flat.insert(k, parse_value(&raw));
        }
    }
    for (k, v) in sets {
        flat.insert(k.clone(), v.clone());
    }
    // an explicit preset replaces any per-head weights given earlier
    if flat.get("head_weights").is_some_and(toml::Value::is_str) {
        flat.retain(|k, _| !k.starts_with("head_weights."));
    }
    Ok((TrainConfig::from_flat(&flat)?, flat))
}
