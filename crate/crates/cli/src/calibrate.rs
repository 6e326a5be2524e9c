//! Layer-weight calibration over the probability simplex.
//!
//! `alpha` is scored with the accurate branch alone in the fusion (`mu = 0`)
//! and `beta` with the robust branch alone (`mu = 1`); each family is
//! searched on its own grid with the other held at its configured value.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use dualtrack_core::config::Config;
use dualtrack_core::eval::{report, Protocol};
use dualtrack_core::harness::FrameHook;
use dualtrack_core::losses::{focal_loss, hinge_l2_loss};
use dualtrack_core::sim::SequenceData;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{run_one, run_suite};
use crate::io::{load_config, load_sequences, write_json};
use crate::{CliError, CliResult, VERSION};

pub const MIN_SEQUENCES: usize = 3;
const PROB_CLAMP: f64 = 1e-6;
const FOREGROUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Eao,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: String,
    pub seed: u64,
    pub objective: Objective,
    pub step: f64,
    pub sequences: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Objective value of the chosen weights; EAO, or mean loss.
    pub alpha_score: f64,
    pub beta_score: f64,
}

/// Points of the simplex in `layers` dimensions with coordinates on a
/// `1/divisions` lattice, first coordinate ascending.
pub fn simplex_grid(layers: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(left - k, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    if layers == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    rec(divisions, layers, &mut Vec::new(), &mut out);
    out.into_iter().map(|p| p.into_iter().map(|k| k as f64 / divisions as f64).collect()).collect()
}

/// Higher is better: EAO first, then mean overlap.
fn eao_score(seqs: &[SequenceData], cfg: &Config) -> CliResult<(f64, f64)> {
    let records = run_suite(seqs, cfg, Protocol::Reset)?;
    let r = report(&records, Protocol::Reset, &cfg.eval).map_err(CliError::data)?;
    Ok((r.eao.unwrap_or(0.0), r.mean_overlap.unwrap_or(0.0)))
}

/// Mean per-frame branch loss; returned negated so that higher is better.
fn loss_score(seqs: &[SequenceData], cfg: &Config, family: Family) -> CliResult<(f64, f64)> {
    let per_seq = seqs
        .par_iter()
        .map(|d| {
            let acc = RefCell::new((0.0, 0usize));
            let hook: FrameHook = Box::new(|k, r| {
                let gt = d.groundtruth[k];
                let t = &cfg.tracker;
                let value = match family {
                    Family::Alpha => match &r.accurate {
                        Some(map) => {
                            let y = t.accurate_target(r, &gt)?;
                            let p = map.map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
                            Some(cfg.loss.lambda_a * focal_loss(&p, &y, cfg.loss.gamma)?.loss)
                        }
                        None => None,
                    },
                    Family::Beta => match &r.robust {
                        Some(map) => {
                            let y = t.robust_target(r, &gt)?;
                            let region: Vec<bool> = y.0.values.iter().map(|&v| v >= FOREGROUND).collect();
                            Some(cfg.loss.lambda_r * hinge_l2_loss(map, &y, &region)?.loss)
                        }
                        None => None,
                    },
                };
                if let Some(v) = value {
                    let mut a = acc.borrow_mut();
                    a.0 += v;
                    a.1 += 1;
                }
                Ok(())
            });
            run_one(d, cfg, Protocol::Ope, Some(hook))?;
            let (sum, n) = acc.into_inner();
            Ok((sum, n))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (sum, n) = per_seq.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean = if n == 0 { f64::INFINITY } else { sum / n as f64 };
    Ok((-mean, 0.0))
}

/// Best weights of one family and their objective value.
pub fn search(seqs: &[SequenceData], base: &Config, family: Family, objective: Objective, divisions: usize) -> CliResult<(Vec<f64>, f64)> {
    let layers = base.features.layer_count;
    let mut best: Option<(Vec<f64>, (f64, f64))> = None;
    for cand in simplex_grid(layers, divisions) {
        let mut cfg = base.clone();
        match family {
            Family::Alpha => {
                cfg.tracker.weights.alpha = cand.clone();
                cfg.tracker.mu = 0.0;
            }
            Family::Beta => {
                cfg.tracker.weights.beta = cand.clone();
                cfg.tracker.mu = 1.0;
            }
        }
        let score = match objective {
            Objective::Eao => eao_score(seqs, &cfg)?,
            Objective::Loss => loss_score(seqs, &cfg, family)?,
        };
        let better = match &best {
            None => true,
            Some((_, b)) => score.0 > b.0 || (score.0 == b.0 && score.1 > b.1),
        };
        if better {
            best = Some((cand, score));
        }
    }
    let (w, (s, _)) = best.ok_or_else(|| CliError::config("empty weight grid"))?;
    let score = if objective == Objective::Loss { -s } else { s };
    Ok((w, score))
}

pub fn calibrate_sequences(seqs: &[SequenceData], base: &Config, objective: Objective, step: f64) -> CliResult<Calibration> {
    if seqs.len() < MIN_SEQUENCES {
        return Err(CliError::config(format!("calibration needs at least {MIN_SEQUENCES} sequences, got {}", seqs.len())));
    }
    let divisions = (1.0 / step).round();
    if !(step > 0.0) || divisions < 1.0 || ((1.0 / step) - divisions).abs() > 1e-9 {
        return Err(CliError::config(format!("step {step} must divide 1")));
    }
    let divisions = divisions as usize;
    let (alpha, alpha_score) = search(seqs, base, Family::Alpha, objective, divisions)?;
    let (beta, beta_score) = search(seqs, base, Family::Beta, objective, divisions)?;
    Ok(Calibration {
        version: VERSION.to_string(),
        seed: base.tracker.seed,
        objective,
        step,
        sequences: seqs.len(),
        alpha,
        beta,
        alpha_score,
        beta_score,
    })
}

pub fn calibrate(seqs: &[PathBuf], config: Option<&Path>, out: &Path, seed: Option<u64>, objective: Objective, step: f64) -> CliResult<Calibration> {
    let mut base = load_config(config)?;
    if let Some(s) = seed {
        base.tracker.seed = s;
    }
    let data = load_sequences(seqs)?;
    let cal = calibrate_sequences(&data, &base, objective, step)?;
    write_json(out, &cal)?;
    Ok(cal)
}
