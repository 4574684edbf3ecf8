//! JSON configuration layering: defaults, then a config file, then
//! `key=value` overrides.

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Recursively copies `patch` onto `base`. Keys missing from `base` are
/// rejected so typos do not pass silently.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key {here:?}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Full dotted path for `key`. A bare key that is not a top-level field is
/// looked up one level down and must match exactly one section.
fn resolve(root: &Map<String, Value>, key: &str) -> Result<Vec<String>> {
    if key.contains('.') || root.contains_key(key) {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let hits: Vec<&String> =
        root.iter().filter(|(_, v)| v.as_object().is_some_and(|o| o.contains_key(key))).map(|(k, _)| k).collect();
    match hits.as_slice() {
        [one] => Ok(vec![(*one).clone(), key.to_string()]),
        [] => bail!("unknown config key {key:?}"),
        many => bail!("ambiguous config key {key:?} (found in {many:?})"),
    }
}

pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let obj = root.as_object().ok_or_else(|| anyhow!("config root is not an object"))?;
    let path = resolve(obj, key.trim())?;
    let mut slot = &mut *root;
    for part in &path {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key {:?}", path.join(".")))?;
    }
    *slot = parse_value(raw.trim());
    Ok(())
}

/// `defaults`, overlaid with the file at `file` (if any) and the overrides.
pub fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&std::path::Path>,
    overrides: &[String],
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, &patch, "")?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).context("config does not match the expected schema")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_resolve_nested_keys() {
        let mut v = json!({"train": {"base_lr": 1e-4, "seed": 0}, "model": {"d_model": 192, "seed_x": 1}});
        apply_override(&mut v, "base_lr=0").unwrap();
        apply_override(&mut v, "model.d_model=64").unwrap();
        apply_override(&mut v, "d_model=32").unwrap();
        assert_eq!(v["train"]["base_lr"], json!(0));
        assert_eq!(v["model"]["d_model"], json!(32));
        assert!(apply_override(&mut v, "nope=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn merge_rejects_unknown_keys() {
        let mut v = json!({"a": 1, "b": {"c": 2}});
        merge(&mut v, &json!({"b": {"c": 5}}), "").unwrap();
        assert_eq!(v["b"]["c"], json!(5));
        assert!(merge(&mut v, &json!({"b": {"d": 5}}), "").is_err());
    }
}
