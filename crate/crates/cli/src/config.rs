//! Flat `key=value` (or JSON) configuration files with flag overrides.
//!
//! Every command's configuration is a serde struct with defaults. The file
//! and the overrides are merged into its JSON form key by key, so an
//! unknown key is reported by name before any work starts. Nested fields
//! use dotted keys (`kl.active=0.2`).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Parses one `value` into JSON: anything that is valid JSON is taken as
/// such, a comma list becomes an array, everything else is a string.
fn parse_value(raw: &str, slot: Option<&Value>) -> Value {
    let raw = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !matches!((slot, &v), (Some(Value::Array(_)), v) if !v.is_array()) {
            return v;
        }
    }
    if let Some(Value::Array(_)) = slot {
        let items = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_value(s, None))
            .collect();
        return Value::Array(items);
    }
    Value::String(raw.to_string())
}

fn set_key(root: &mut Map<String, Value>, key: &str, raw: &str) -> Result<(), CliError> {
    let unknown = || CliError::usage(format!("unknown config key '{key}'"));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or_else(unknown)?;
    let mut obj = root;
    for p in parts {
        obj = obj.get_mut(p).and_then(Value::as_object_mut).ok_or_else(unknown)?;
    }
    let slot = obj.get(last).ok_or_else(unknown)?;
    let v = parse_value(raw, Some(slot));
    obj.insert(last.to_string(), v);
    Ok(())
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    Value::Object(_) => flatten_into(&key, v, out),
                    _ => out.push((key, v.to_string())),
                }
            }
        }
        _ => out.push((prefix.to_string(), value.to_string())),
    }
}

/// Reads `key=value` lines (`#` comments) or a JSON object.
pub fn read_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: Value = serde_json::from_str(trimmed).map_err(|e| CliError::usage(format!("config JSON: {e}")))?;
        let mut out = Vec::new();
        flatten_into("", &v, &mut out);
        return Ok(out);
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

/// Defaults, then the file, then the overrides in order.
pub fn load<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<T, CliError> {
    let Value::Object(mut root) = serde_json::to_value(T::default()).expect("config serializes") else {
        unreachable!("configs are structs");
    };
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(read_pairs(&text)?);
    }
    pairs.extend(overrides.iter().cloned());
    for (k, v) in &pairs {
        set_key(&mut root, k, v)?;
    }
    serde_json::from_value(Value::Object(root)).map_err(|e| CliError::usage(format!("invalid config: {e}")))
}

/// The `key=value` rendering of a configuration, one line per leaf.
pub fn render<T: Serialize>(config: &T) -> String {
    let mut pairs = Vec::new();
    flatten_into("", &serde_json::to_value(config).expect("config serializes"), &mut pairs);
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        a: f64,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Cfg {
        n: usize,
        name: String,
        list: Vec<usize>,
        opt: Option<usize>,
        inner: Inner,
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn overrides_apply_in_order() {
        let c: Cfg = load(None, &pairs(&[("n", "3"), ("name", "x"), ("list", "4,5"), ("inner.a", "0.5"), ("n", "7"), ("opt", "2")])).unwrap();
        assert_eq!(
            c,
            Cfg {
                n: 7,
                name: "x".into(),
                list: vec![4, 5],
                opt: Some(2),
                inner: Inner { a: 0.5 },
            }
        );
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = load::<Cfg>(None, &pairs(&[("bogus", "1")])).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("bogus"));
        let e = load::<Cfg>(None, &pairs(&[("inner.b", "1")])).unwrap_err();
        assert!(e.message.contains("inner.b"));
    }

    #[test]
    fn rendering_round_trips() {
        let c = Cfg {
            n: 2,
            name: "a b".into(),
            list: vec![1],
            opt: None,
            inner: Inner { a: 0.25 },
        };
        let back: Cfg = load(None, &read_pairs(&render(&c)).unwrap()).unwrap();
        assert_eq!(back, c);
        let json = serde_json::to_string(&c).unwrap();
        let back: Cfg = load(None, &read_pairs(&json).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert_eq!(read_pairs("n 3").unwrap_err().code, 2);
        assert!(read_pairs("# comment\n\nn=3 # trailing\n").unwrap() == pairs(&[("n", "3")]));
    }
}
