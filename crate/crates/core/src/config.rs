//! Flat `key = value` configuration files.
//!
//! Keys are dotted paths into [`TrainConfig`] (`actor_lr`,
//! `env.intervention_threshold`, `env.tasks.0.xy_range`). Lists of numbers
//! are comma separated. Unknown keys and values of the wrong type are
//! errors. `#` starts a comment.
//!
//! Environment variables named `DUAL_ACTOR_<KEY>` override the file, with
//! the key upper-cased and dots written as `__`
//! (`DUAL_ACTOR_ENV__EXPERT_NOISE=0.002`). `DUAL_ACTOR_LEARNER_ADDR` and
//! `DUAL_ACTOR_UI_ADDR` are service addresses and are not config keys.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "DUAL_ACTOR_";
/// Variables under the prefix that address services rather than config keys.
pub const RESERVED_ENV: &[&str] = &["DUAL_ACTOR_LEARNER_ADDR", "DUAL_ACTOR_UI_ADDR"];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            let s: Vec<String> = items.iter().map(render_scalar).collect();
            out.push((prefix.to_string(), s.join(", ")));
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&key(&i.to_string()), v, out);
            }
        }
        other => out.push((prefix.to_string(), render_scalar(other))),
    }
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Every settable key with its current value, in file syntax.
pub fn to_pairs(cfg: &TrainConfig) -> Vec<(String, String)> {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    out
}

pub fn render(cfg: &TrainConfig) -> String {
    to_pairs(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn parse_like(existing: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot parse {raw:?} as {}", kind(existing)));
    Ok(match existing {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            let v: i64 = raw.parse().map_err(|_| bad())?;
            if n.is_u64() && v < 0 {
                return Err(bad());
            }
            Value::from(v)
        }
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if parts.len() != items.len() {
                return Err(Error::Config(format!(
                    "{key}: expected {} comma-separated values, got {}",
                    items.len(),
                    parts.len()
                )));
            }
            Value::Array(
                items
                    .iter()
                    .zip(parts)
                    .map(|(item, p)| parse_like(item, p, key))
                    .collect::<Result<_>>()?,
            )
        }
        Value::Null => {
            if raw == "none" || raw.is_empty() {
                Value::Null
            } else {
                return Err(bad());
            }
        }
        Value::Object(_) => return Err(Error::Config(format!("{key} is a section, not a value"))),
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() || n.is_i64() => "an integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Null => "none",
        Value::Object(_) => "a section",
    }
}

fn slot<'a>(root: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part).ok_or_else(unknown)?,
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| unknown())?;
                a.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    Ok(cur)
}

/// Applies `key = value` assignments in order, then validates.
pub fn apply<'a>(cfg: &TrainConfig, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<TrainConfig> {
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    for (key, raw) in assignments {
        let target = slot(&mut root, key)?;
        let new = parse_like(target, raw, key)?;
        *target = new;
    }
    let out: TrainConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

/// Parses file text into `(line, key, value)` triples.
pub fn parse_text(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn from_text(text: &str) -> Result<TrainConfig> {
    let pairs = parse_text(text)?;
    let mut cfg = TrainConfig::default();
    for (line, k, v) in &pairs {
        cfg = apply(&cfg, [(k.as_str(), v.as_str())]).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    }
    Ok(cfg)
}

/// Environment overrides as `(key, value)` pairs.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    vars.into_iter()
        .filter(|(k, _)| !RESERVED_ENV.contains(&k.as_str()))
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect()
}

/// Defaults, then the file (if any), then `DUAL_ACTOR_*` variables.
pub fn load(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => from_text(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let overrides = env_overrides(std::env::vars());
    for (k, v) in &overrides {
        cfg = apply(&cfg, [(k.as_str(), v.as_str())]).map_err(|e| Error::Config(format!("{ENV_PREFIX}{}: {e}", k.to_uppercase())))?;
    }
    Ok(cfg)
}

/// Writes the fully resolved configuration next to run outputs.
pub fn write_resolved(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render(cfg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(from_text(&render(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn assignments_apply() {
        let text = "# comment\nactor_lr = 0.001\nenv.intervention_threshold = 0.005 # inline\nlambda_online = 0.4, 0.6\nenv.tasks.1.xy_range = 0.04\ndisable_dual_actor = true\n";
        let cfg = from_text(text).unwrap();
        assert_eq!(cfg.actor_lr, 0.001);
        assert_eq!(cfg.env.intervention_threshold, 0.005);
        assert_eq!(cfg.lambda_online, (0.4, 0.6));
        assert_eq!(cfg.env.tasks[1].xy_range, 0.04);
        assert!(cfg.disable_dual_actor);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        for text in [
            "actor_learning_rate = 1",
            "env.nope = 1",
            "actor_lr = fast",
            "batch_size = -3",
            "lambda_online = 0.5",
            "just words",
            "batch_size = 100",
            "env.tasks.9.xy_range = 0.1",
        ] {
            assert!(from_text(text).is_err(), "{text}");
        }
        let err = from_text("\n\nwat = 1").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn env_names_map_to_keys() {
        let o = env_overrides(vec![
            ("DUAL_ACTOR_ENV__EXPERT_NOISE".to_string(), "0.002".to_string()),
            ("HOME".to_string(), "/root".to_string()),
            ("DUAL_ACTOR_LEARNER_ADDR".to_string(), "127.0.0.1:7000".to_string()),
        ]);
        assert_eq!(o, vec![("env.expert_noise".to_string(), "0.002".to_string())]);
        let cfg = apply(&TrainConfig::default(), o.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(cfg.env.expert_noise, 0.002);
    }
}
