//! Benchmark metrics: reset protocol with accuracy, robustness and a
//! simplified expected average overlap, one-pass success and precision
//! curves, heatmap divergences and cumulative sweep averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::gridmath::{argmax_peak, softmax_norm, Heatmap};

pub const PRECISION_PX: f64 = 20.0;
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;
pub const SUCCESS_STEPS: usize = 100;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Reset,
    Ope,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" => Ok(Protocol::Reset),
            "ope" => Ok(Protocol::Ope),
            _ => Err(Error::InvalidArgument(format!("unknown protocol {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResetConfig {
    pub reinit_delay: usize,
    pub burn_in: usize,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self { reinit_delay: 5, burn_in: 10 }
    }
}

/// Anything that can be (re)started on a frame and then queried frame by
/// frame in increasing order.
pub trait SequenceTracker {
    fn start(&mut self, frame: usize, gt: &BBox) -> Result<()>;
    fn track(&mut self, frame: usize) -> Result<BBox>;
}

/// Per-frame tracker output kept alongside a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub peak: f64,
    pub lost: bool,
}

/// Mean heatmap divergences of one run, per branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStats {
    pub frames: usize,
    pub kld_robust: Option<f64>,
    pub kld_accurate: Option<f64>,
    pub npd_robust: Option<f64>,
    pub npd_accurate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sequence: String,
    /// Top-left `[x, y, w, h]`; gap frames after a failure are all zeros.
    pub boxes: Vec<[f64; 4]>,
    pub overlaps: Vec<f64>,
    pub failures: Vec<usize>,
    pub config: serde_json::Value,
    pub protocol: Protocol,
    /// Frames on which the tracker was (re)started from groundtruth.
    #[serde(default)]
    pub inits: Vec<usize>,
    pub groundtruth: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<FrameLog>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<HeatmapStats>,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.overlaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overlaps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.overlaps.len();
        if self.boxes.len() != n || self.groundtruth.len() != n {
            return Err(Error::Malformed(format!("{}: boxes, overlaps and groundtruth lengths differ", self.sequence)));
        }
        if self.overlaps.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return Err(Error::Malformed(format!("{}: overlap outside [0, 1]", self.sequence)));
        }
        let increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&f| f < n);
        if !increasing(&self.failures) || !increasing(&self.inits) {
            return Err(Error::Malformed(format!("{}: frame lists must be increasing and in range", self.sequence)));
        }
        if self.protocol == Protocol::Ope && !self.failures.is_empty() {
            return Err(Error::Malformed(format!("{}: one-pass record with failures", self.sequence)));
        }
        Ok(())
    }

    /// Frames that count towards accuracy: tracked, not a failure, and past
    /// the burn-in that follows every (re)start.
    pub fn scored_frames(&self, burn_in: usize) -> Vec<usize> {
        let mut excluded = vec![false; self.len()];
        for &s in &self.inits {
            for f in s..(s + burn_in.max(1)).min(self.len()) {
                excluded[f] = true;
            }
        }
        let mut gap = vec![false; self.len()];
        for &f in &self.failures {
            excluded[f] = true;
            let next = self.inits.iter().copied().find(|&s| s > f).unwrap_or(self.len());
            for g in gap.iter_mut().take(next).skip(f) {
                *g = true;
            }
        }
        (0..self.len()).filter(|&k| !excluded[k] && !gap[k]).collect()
    }

    /// Overlap curve with zeros from each failure up to and including the
    /// restart frame.
    pub fn expected_overlap_curve(&self) -> Vec<f64> {
        let mut curve = self.overlaps.clone();
        for &f in &self.failures {
            let restart = self.inits.iter().copied().find(|&s| s > f).unwrap_or(self.len() - 1);
            for v in curve.iter_mut().take(restart + 1).skip(f) {
                *v = 0.0;
            }
        }
        curve
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eao: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kld: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub npd: Option<f64>,
    /// Per-branch divergences; `kld` and `npd` take the robust value when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kld_robust: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kld_accurate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub npd_robust: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub npd_accurate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failures: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_overlap: Option<f64>,
    pub sequences: usize,
}

pub fn xywh_to_bbox(v: &[f64; 4]) -> BBox {
    BBox { cx: v[0] + v[2] / 2.0, cy: v[1] + v[3] / 2.0, w: v[2], h: v[3] }
}

fn overlap_of(pred: &BBox, gt: &BBox) -> f64 {
    if pred.w > 0.0 && pred.h > 0.0 {
        iou(pred, gt).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Reset protocol: a failure is an overlap of zero; the tracker is
/// restarted from groundtruth `reinit_delay` frames later.
pub fn run_reset_protocol<T: SequenceTracker>(
    tracker: &mut T,
    name: &str,
    gt: &[BBox],
    cfg: &ResetConfig,
    config: serde_json::Value,
) -> Result<RunRecord> {
    if gt.len() <= cfg.burn_in {
        return Err(Error::InvalidArgument(format!("sequence of {} frames is not longer than burn-in {}", gt.len(), cfg.burn_in)));
    }
    let n = gt.len();
    let mut boxes = vec![[0.0; 4]; n];
    let mut overlaps = vec![0.0; n];
    let mut failures = Vec::new();
    let mut inits = Vec::new();
    let mut k = 0;
    while k < n {
        tracker.start(k, &gt[k])?;
        inits.push(k);
        boxes[k] = gt[k].to_xywh();
        overlaps[k] = 1.0;
        k += 1;
        while k < n {
            let b = tracker.track(k)?;
            boxes[k] = b.to_xywh();
            overlaps[k] = overlap_of(&b, &gt[k]);
            if overlaps[k] <= 0.0 {
                failures.push(k);
                k += cfg.reinit_delay.max(1);
                break;
            }
            k += 1;
        }
    }
    Ok(RunRecord {
        sequence: name.to_string(),
        boxes,
        overlaps,
        failures,
        config,
        protocol: Protocol::Reset,
        inits,
        groundtruth: gt.iter().map(BBox::to_xywh).collect(),
        frames: None,
        heatmaps: None,
    })
}

/// One-pass evaluation: start on frame 0 and never restart.
pub fn run_one_pass<T: SequenceTracker>(tracker: &mut T, name: &str, gt: &[BBox], config: serde_json::Value) -> Result<RunRecord> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    tracker.start(0, &gt[0])?;
    let mut boxes = vec![gt[0].to_xywh()];
    let mut overlaps = vec![1.0];
    for (k, g) in gt.iter().enumerate().skip(1) {
        let b = tracker.track(k)?;
        boxes.push(b.to_xywh());
        overlaps.push(overlap_of(&b, g));
    }
    Ok(RunRecord {
        sequence: name.to_string(),
        boxes,
        overlaps,
        failures: Vec::new(),
        config,
        protocol: Protocol::Ope,
        inits: vec![0],
        groundtruth: gt.iter().map(BBox::to_xywh).collect(),
        frames: None,
        heatmaps: None,
    })
}

/// `A` pools every scored frame; `R` averages failures per frame over
/// sequences.
pub fn accuracy_robustness(records: &[RunRecord], burn_in: usize) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut r = 0.0;
    for rec in records {
        for k in rec.scored_frames(burn_in) {
            sum += rec.overlaps[k];
            count += 1;
        }
        r += rec.failures.len() as f64 / rec.len() as f64;
    }
    let a = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok((a, r / records.len() as f64))
}

/// Default averaging interval: from half the median length to the last
/// frame of the longest sequence.
pub fn default_eao_interval(records: &[RunRecord]) -> (usize, usize) {
    let mut lens: Vec<usize> = records.iter().map(RunRecord::len).collect();
    lens.sort_unstable();
    if lens.is_empty() {
        return (0, 0);
    }
    let median = if lens.len() % 2 == 1 {
        lens[lens.len() / 2] as f64
    } else {
        (lens[lens.len() / 2 - 1] + lens[lens.len() / 2]) as f64 / 2.0
    };
    let hi = lens[lens.len() - 1].saturating_sub(1);
    ((0.5 * median).floor() as usize, hi)
}

/// Mean over frames `lo..=hi` of the per-frame expected overlap, averaging
/// only the sequences long enough to contain each frame.
pub fn eao_lite(records: &[RunRecord], interval: (usize, usize)) -> Result<f64> {
    let (lo, hi) = interval;
    let longest = records.iter().map(RunRecord::len).max().unwrap_or(0);
    if records.is_empty() || lo > hi || hi >= longest {
        return Err(Error::InvalidArgument(format!("interval [{lo}, {hi}] outside observed lengths")));
    }
    let curves: Vec<Vec<f64>> = records.iter().map(RunRecord::expected_overlap_curve).collect();
    let mut total = 0.0;
    for i in lo..=hi {
        let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
        total += vals.iter().sum::<f64>() / vals.len() as f64;
    }
    Ok(total / (hi - lo + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeCurves {
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
}

/// Success curve over `tau = 0, 0.01, ..., 1` with strict `IoU > tau`, its
/// mean, and center-error precision in pixels and in units of box size.
pub fn ope_curves(records: &[RunRecord]) -> Result<OpeCurves> {
    let mut overlaps = Vec::new();
    let mut errors = Vec::new();
    let mut norm_errors = Vec::new();
    for rec in records {
        rec.validate()?;
        for (b, g) in rec.boxes.iter().zip(&rec.groundtruth) {
            let (p, t) = (xywh_to_bbox(b), xywh_to_bbox(g));
            overlaps.push(overlap_of(&p, &t));
            errors.push((p.cx - t.cx).hypot(p.cy - t.cy));
            norm_errors.push(((p.cx - t.cx) / t.w).hypot((p.cy - t.cy) / t.h));
        }
    }
    if overlaps.is_empty() {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let n = overlaps.len() as f64;
    let thresholds: Vec<f64> = (0..=SUCCESS_STEPS).map(|k| k as f64 / SUCCESS_STEPS as f64).collect();
    let success: Vec<f64> = thresholds.iter().map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / n).collect();
    let auc = success.iter().sum::<f64>() / success.len() as f64;
    let frac = |v: &[f64], th: f64| v.iter().filter(|&&e| e < th).count() as f64 / n;
    Ok(OpeCurves {
        auc,
        precision: frac(&errors, PRECISION_PX),
        norm_precision: frac(&norm_errors, NORM_PRECISION_THRESHOLD),
        thresholds,
        success,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Softmax,
    Sum,
}

/// `D(q || p)` with `q` the sum-normalized groundtruth map (negatives
/// dropped) and `p` the normalized prediction.
pub fn kld(gt_map: &Heatmap, pred_map: &Heatmap, norm: Normalization) -> Result<f64> {
    if !gt_map.same_shape(pred_map) {
        return Err(Error::ShapeMismatch("kld maps differ".into()));
    }
    let q: Vec<f64> = gt_map.values.iter().map(|v| v.max(0.0)).collect();
    let zq: f64 = q.iter().sum();
    if zq <= 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    let p = match norm {
        Normalization::Softmax => softmax_norm(pred_map).values,
        Normalization::Sum => {
            let clipped: Vec<f64> = pred_map.values.iter().map(|v| v.max(0.0)).collect();
            let z: f64 = clipped.iter().sum();
            if z <= 0.0 {
                return Err(Error::DegenerateDistribution);
            }
            clipped.into_iter().map(|v| v / z).collect()
        }
    };
    Ok(q.iter()
        .zip(&p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| {
            let qi = qi / zq;
            qi * (qi / pi.max(PROB_FLOOR)).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Peak distance to `gt_center` (row, col) over the grid diagonal.
pub fn npd(gt_center: (f64, f64), pred_map: &Heatmap) -> f64 {
    let ((i, j, _), _) = argmax_peak(pred_map);
    let d = (i as f64 - gt_center.0).hypot(j as f64 - gt_center.1);
    d / (pred_map.height as f64).hypot(pred_map.width as f64)
}

pub fn sweep_cumulative(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values".into()));
    }
    let mut sum = 0.0;
    Ok(values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            sum += v;
            sum / (k + 1) as f64
        })
        .collect())
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Full report for a protocol. Heatmap divergences prefer the robust
/// branch and fall back to the accurate one.
pub fn report(records: &[RunRecord], protocol: Protocol, reset: &ResetConfig) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    for r in records {
        r.validate()?;
        if r.protocol != protocol {
            return Err(Error::Malformed(format!("{}: record protocol does not match", r.sequence)));
        }
    }
    let mut out = MetricsReport { sequences: records.len(), ..MetricsReport::default() };
    match protocol {
        Protocol::Reset => {
            let (a, r) = accuracy_robustness(records, reset.burn_in)?;
            out.accuracy = Some(a);
            out.robustness = Some(r);
            out.eao = Some(eao_lite(records, default_eao_interval(records))?);
            out.failures = Some(records.iter().map(|r| r.failures.len()).sum());
        }
        Protocol::Ope => {
            let c = ope_curves(records)?;
            out.auc = Some(c.auc);
            out.precision = Some(c.precision);
            out.norm_precision = Some(c.norm_precision);
        }
    }
    out.mean_overlap = mean(records.iter().flat_map(|r| r.overlaps.iter().copied()));
    let stats: Vec<&HeatmapStats> = records.iter().filter_map(|r| r.heatmaps.as_ref()).collect();
    out.kld = mean(stats.iter().filter_map(|s| s.kld_robust.or(s.kld_accurate)));
    out.npd = mean(stats.iter().filter_map(|s| s.npd_robust.or(s.npd_accurate)));
    out.kld_robust = mean(stats.iter().filter_map(|s| s.kld_robust));
    out.kld_accurate = mean(stats.iter().filter_map(|s| s.kld_accurate));
    out.npd_robust = mean(stats.iter().filter_map(|s| s.npd_robust));
    out.npd_accurate = mean(stats.iter().filter_map(|s| s.npd_accurate));
    Ok(out)
}
