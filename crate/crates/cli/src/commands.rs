//! `simulate`, `track`, `eval` and `ablate`.

use std::path::{Path, PathBuf};

use dualtrack_core::config::Config;
use dualtrack_core::eval::{report, sweep_cumulative, MetricsReport, Protocol, RunRecord};
use dualtrack_core::harness::{run_sequence, FrameHook};
use dualtrack_core::sim::{encode_sequence, gen_sequence, load_sequence, SequenceData, SequenceMode};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{load_config, load_sequences, read_run, write_atomic, write_json};
use crate::sweep::{apply, grid, parse_specs};
use crate::{CliError, CliResult, VERSION};

fn with_seed(mut cfg: Config, seed: Option<u64>, f: impl FnOnce(&mut Config, u64)) -> Config {
    if let Some(s) = seed {
        f(&mut cfg, s);
    }
    cfg
}

/// Write `count` sequences; a single one goes straight into `out`, more go
/// into `out/seq_000`, `out/seq_001`, ...
pub fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>, count: usize, mode: SequenceMode) -> CliResult<Vec<PathBuf>> {
    let cfg = with_seed(load_config(config)?, seed, |c, s| c.sim.seed = s);
    if count == 0 {
        return Err(CliError::config("count must be positive"));
    }
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let mut run_cfg = cfg.clone();
        run_cfg.sim.seed = cfg.sim.seed.wrapping_add(i as u64);
        let seq = gen_sequence(&run_cfg.sim).map_err(CliError::config)?;
        let files = encode_sequence(&seq, &run_cfg.sim, mode, run_cfg.to_json()).map_err(CliError::data)?;
        let dir = if count == 1 { out.to_path_buf() } else { out.join(format!("seq_{i:03}")) };
        for (name, bytes) in files {
            write_atomic(&dir.join(name), &bytes)?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn run_one(data: &SequenceData, cfg: &Config, protocol: Protocol, hook: Option<FrameHook<'_>>) -> CliResult<RunRecord> {
    run_sequence(data, &cfg.features, &cfg.tracker, protocol, &cfg.eval, cfg.to_json(), hook)
        .map_err(|e| CliError::data(format!("{}: {e}", data.name)))
}

/// Every sequence under one config, in parallel, results in input order.
pub fn run_suite(seqs: &[SequenceData], cfg: &Config, protocol: Protocol) -> CliResult<Vec<RunRecord>> {
    seqs.par_iter().map(|d| run_one(d, cfg, protocol, None)).collect()
}

pub fn track(seq: &Path, config: Option<&Path>, out: &Path, dump: Option<&Path>, protocol: Protocol, seed: Option<u64>) -> CliResult<RunRecord> {
    let cfg = with_seed(load_config(config)?, seed, |c, s| c.tracker.seed = s);
    let data = load_sequence(seq).map_err(|e| CliError::data(format!("{}: {e}", seq.display())))?;
    let mut maps: Vec<(usize, String)> = Vec::new();
    let record = {
        let hook: Option<FrameHook> = dump.map(|_| -> FrameHook {
            Box::new(|k, r| {
                maps.push((k, r.fused.to_text()));
                Ok(())
            })
        });
        run_one(&data, &cfg, protocol, hook)?
    };
    if let Some(dir) = dump {
        for (k, text) in &maps {
            write_atomic(&dir.join(format!("{k:08}.txt")), text.as_bytes())?;
        }
    }
    write_json(out, &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportFile {
    pub version: String,
    pub seed: Option<u64>,
    pub protocol: Protocol,
    pub runs: Vec<String>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

fn tracker_seed(rec: &RunRecord) -> Option<u64> {
    rec.config.pointer("/tracker/seed").and_then(|v| v.as_u64())
}

pub fn build_report(records: &[RunRecord], protocol: Protocol, cfg: Option<&Config>) -> CliResult<ReportFile> {
    let reset = match cfg {
        Some(c) => c.eval,
        None => records
            .first()
            .and_then(|r| r.config.get("eval").cloned())
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default(),
    };
    let metrics = report(records, protocol, &reset).map_err(CliError::data)?;
    let seeds: Vec<Option<u64>> = records.iter().map(tracker_seed).collect();
    let seed = if seeds.windows(2).all(|w| w[0] == w[1]) { seeds.first().copied().flatten() } else { None };
    Ok(ReportFile {
        version: VERSION.to_string(),
        seed,
        protocol,
        runs: records.iter().map(|r| r.sequence.clone()).collect(),
        metrics,
    })
}

pub fn eval(runs: &[PathBuf], protocol: Protocol, out: &Path, config: Option<&Path>) -> CliResult<ReportFile> {
    if runs.is_empty() {
        return Err(CliError::config("at least one run file is required"));
    }
    let cfg = match config {
        Some(p) => Some(load_config(Some(p))?),
        None => None,
    };
    let records = runs.iter().map(|p| read_run(p)).collect::<CliResult<Vec<_>>>()?;
    let rep = build_report(&records, protocol, cfg.as_ref())?;
    write_json(out, &rep)?;
    Ok(rep)
}

pub const ABLATION_HEADER: &str = "param,value,A,R,eao,auc";
const CUMULATIVE_HEADER: &str = "cum_A,cum_R,cum_eao,cum_auc";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    /// `A, R, eao, auc`.
    pub metrics: [f64; 4],
    pub cumulative: [f64; 4],
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER},{CUMULATIVE_HEADER}\n");
    for r in rows {
        let nums: Vec<String> = r.metrics.iter().chain(&r.cumulative).map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{},{},{}\n", r.param, r.value, nums.join(",")));
    }
    out
}

/// One row per sweep point with reset-protocol `A`, `R`, `eao` and
/// one-pass `auc`, plus running means down the table.
pub fn ablate(seqs: &[PathBuf], sweeps: &[String], config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<Vec<AblationRow>> {
    let base = with_seed(load_config(config)?, seed, |c, s| c.tracker.seed = s);
    let axes = parse_specs(sweeps)?;
    let points = grid(&axes);
    let configs = points.iter().map(|p| apply(&base, p)).collect::<CliResult<Vec<_>>>()?;
    let data = load_sequences(seqs)?;
    let mut rows = Vec::with_capacity(points.len());
    for (point, cfg) in points.iter().zip(&configs) {
        let reset = build_report(&run_suite(&data, cfg, Protocol::Reset)?, Protocol::Reset, Some(cfg))?.metrics;
        let ope = build_report(&run_suite(&data, cfg, Protocol::Ope)?, Protocol::Ope, Some(cfg))?.metrics;
        let get = |v: Option<f64>| v.unwrap_or(f64::NAN);
        rows.push(AblationRow {
            param: point.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(";"),
            value: point.iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join(";"),
            metrics: [get(reset.accuracy), get(reset.robustness), get(reset.eao), get(ope.auc)],
            cumulative: [0.0; 4],
        });
    }
    for c in 0..4 {
        let col: Vec<f64> = rows.iter().map(|r| r.metrics[c]).collect();
        let cum = sweep_cumulative(&col).map_err(CliError::config)?;
        for (r, v) in rows.iter_mut().zip(cum) {
            r.cumulative[c] = v;
        }
    }
    write_atomic(out, ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
