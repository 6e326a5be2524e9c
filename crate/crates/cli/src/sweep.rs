//! Sweep specifications: `key=lo:hi:step`, `key=a,b,c`, or `@file` with one
//! specification per line. Several specifications form a cartesian grid.

use std::fs;
use std::path::Path;

use dualtrack_core::config::Config;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// One grid point: the assignments in axis order.
pub type Point = Vec<(String, String)>;

const MAX_RANGE_VALUES: usize = 100_000;

fn format_number(v: f64) -> String {
    let r = (v * 1e9).round() / 1e9;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn parse_range(spec: &str) -> Option<Vec<String>> {
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>().ok()).collect::<Option<_>>()?;
    let [lo, hi, step] = parts[..] else { return None };
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return None;
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > MAX_RANGE_VALUES {
        return None;
    }
    Some((0..count).map(|k| format_number(lo + k as f64 * step)).collect())
}

pub fn parse_axis(spec: &str) -> CliResult<Axis> {
    let bad = || CliError::config(format!("malformed sweep {spec:?}"));
    let (key, rhs) = spec.split_once('=').ok_or_else(bad)?;
    let (key, rhs) = (key.trim(), rhs.trim());
    if key.is_empty() || rhs.is_empty() {
        return Err(bad());
    }
    let values = if rhs.contains(':') {
        parse_range(rhs).ok_or_else(bad)?
    } else {
        let v: Vec<String> = rhs.split(',').map(|s| s.trim().to_string()).collect();
        if v.iter().any(String::is_empty) {
            return Err(bad());
        }
        v
    };
    Ok(Axis { key: key.to_string(), values })
}

/// Expand `@file` arguments and parse every axis.
pub fn parse_specs(specs: &[String]) -> CliResult<Vec<Axis>> {
    let mut lines = Vec::new();
    for s in specs {
        match s.strip_prefix('@') {
            Some(path) => {
                let text = fs::read_to_string(Path::new(path)).map_err(|e| CliError::config(format!("{path}: {e}")))?;
                lines.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from));
            }
            None => lines.push(s.clone()),
        }
    }
    if lines.is_empty() {
        return Err(CliError::config("empty sweep"));
    }
    lines.iter().map(|l| parse_axis(l)).collect()
}

/// Cartesian product, first axis outermost.
pub fn grid(axes: &[Axis]) -> Vec<Point> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect()
    })
}

/// Apply a grid point to a base config and validate the result.
pub fn apply(base: &Config, point: &Point) -> CliResult<Config> {
    let mut cfg = base.clone();
    for (k, v) in point {
        cfg = cfg.with(k, v).map_err(|e| CliError::config(format!("sweep {k}={v}: {e}")))?;
    }
    cfg.validate().map_err(|e| CliError::config(format!("sweep point {point:?}: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_lists() {
        let a = parse_axis("tracker.mu=0:1:0.1").unwrap();
        assert_eq!(a.values.len(), 11);
        assert_eq!(a.values[3], "0.3");
        assert_eq!(a.values[10], "1");
        let b = parse_axis("tracker.robust_branch=onr,onc1s").unwrap();
        assert_eq!(b.values, vec!["onr", "onc1s"]);
        for bad in ["mu", "=1", "tracker.mu=", "tracker.mu=0:1", "tracker.mu=1:0:0.1", "tracker.mu=0:1:0", "tracker.mu=a,,b"] {
            assert!(parse_axis(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cartesian_order() {
        let axes = vec![parse_axis("a=1,2").unwrap(), parse_axis("b=x,y,z").unwrap()];
        let g = grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], vec![("a".to_string(), "1".to_string()), ("b".to_string(), "y".to_string())]);
        assert_eq!(g[3][0].1, "2");
    }

    #[test]
    fn apply_validates() {
        let base = Config::default();
        let ok = apply(&base, &vec![("tracker.mu".into(), "0.3".into())]).unwrap();
        assert_eq!(ok.tracker.mu, 0.3);
        assert!(apply(&base, &vec![("tracker.mu".into(), "3".into())]).is_err());
        assert!(apply(&base, &vec![("tracker.zzz".into(), "3".into())]).is_err());
    }
}
