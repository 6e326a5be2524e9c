//! Flat `key=value` configuration with dotted namespaces, e.g.
//! `tracker.mu=0.8` or `tracker.learner.memory=50`.

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{Error, Result};
use crate::eval::ResetConfig;
use crate::features::FeatureConfig;
use crate::losses::LossConfig;
use crate::sim::SimConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub tracker: TrackerConfig,
    pub sim: SimConfig,
    pub features: FeatureConfig,
    pub loss: LossConfig,
    pub eval: ResetConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.sim.validate()?;
        self.features.validate()?;
        self.loss.validate()?;
        self.tracker.weights.validate(self.features.layer_count)?;
        if self.features.identity_dim != self.sim.identity_dim {
            return Err(Error::InvalidArgument("features.identity_dim must equal sim.identity_dim".into()));
        }
        Ok(())
    }

    /// Parse a flat file on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value", n + 1)))?;
            cfg = cfg.with(k.trim(), v.trim()).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with one field replaced; does not validate.
    pub fn with(&self, key: &str, value: &str) -> Result<Config> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut root, |node, part| node.as_object_mut().and_then(|m| m.get_mut(part)))
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown key {key}")))?;
        *slot = parse_like(slot, value).ok_or_else(|| Error::InvalidArgument(format!("bad value {value:?} for {key}")))?;
        serde_json::from_value(root).map_err(|e| Error::InvalidArgument(format!("{key}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let root = serde_json::to_value(self).ok()?;
        key.split('.').try_fold(&root, |node, part| node.get(part)).cloned()
    }

    /// Every effective key, sorted, in the same flat syntax.
    pub fn to_flat(&self) -> String {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.sort();
        out.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), render(v))),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_scalar(old: &Value, s: &str) -> Option<Value> {
    match old {
        Value::Bool(_) => s.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => s.parse::<u64>().ok().map(|v| Value::Number(v.into())),
        Value::Number(n) if n.is_i64() => s.parse::<i64>().ok().map(|v| Value::Number(v.into())),
        Value::Number(_) => s.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number),
        Value::String(_) => Some(Value::String(s.to_string())),
        Value::Null => match s {
            "none" | "null" => Some(Value::Null),
            _ => s.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number),
        },
        _ => None,
    }
}

fn parse_like(old: &Value, s: &str) -> Option<Value> {
    match old {
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::Number(Number::from_f64(0.0)?));
            let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
            parts.iter().map(|p| parse_scalar(&proto, p)).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        Value::Number(n) if !n.is_f64() => {
            // integers may be written as 3.0
            parse_scalar(old, s).or_else(|| {
                let f = s.parse::<f64>().ok()?;
                (f.fract() == 0.0 && f >= 0.0).then(|| Value::Number((f as u64).into()))
            })
        }
        _ => parse_scalar(old, s),
    }
}
