//! Per-frame tracking pipeline: robust and accurate branches, heatmap
//! fusion, post-processing, direct regression, score voting and the online
//! update loop.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::{aggregate_layers, upchannel_xcorr, FeaturePyramid, LayerWeights};
use crate::error::{Error, Result};
use crate::features::template_region;
use crate::geometry::{encode_offsets, iou, make_anchor_grid, AnchorGrid, AnchorShape, BBox, DenseBoxes};
use crate::gridmath::{argmax_peak, broadcast_anchor, cosine_window, Cell, FeatureMap, Heatmap};
use crate::labels::{assign_atss, assign_bernoulli_iou, gaussian_label, LabelConfig, LabelMap};
use crate::losses::ResidualParams;
use crate::online::{
    classification_params, detect_distractor, init_filter, optimize, regression_params, schedule_update,
    OnlineFilter, OnlineLearnerConfig, SupportSet, UpdateKind, FILTER_SIZE,
};

const VOTE_DENOM_EPS: f64 = 1e-12;
const KERNEL_ENERGY_EPS: f64 = 1e-12;
const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustBranch {
    Onr,
    Onc1s,
    Onc5s,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccurateBranch {
    Ofc5s,
    Ofc1s,
    Ofr,
    None,
}

impl RobustBranch {
    pub const ALL: [RobustBranch; 3] = [RobustBranch::Onr, RobustBranch::Onc1s, RobustBranch::Onc5s];

    /// Filters trained online; one per output anchor.
    pub fn filters(self) -> usize {
        match self {
            RobustBranch::Onr | RobustBranch::Onc1s => 1,
            RobustBranch::Onc5s => 5,
            RobustBranch::None => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RobustBranch::Onr => "onr",
            RobustBranch::Onc1s => "onc1s",
            RobustBranch::Onc5s => "onc5s",
            RobustBranch::None => "none",
        }
    }
}

impl AccurateBranch {
    pub const ALL: [AccurateBranch; 3] = [AccurateBranch::Ofr, AccurateBranch::Ofc1s, AccurateBranch::Ofc5s];

    pub fn anchors(self) -> usize {
        match self {
            AccurateBranch::Ofc5s => 5,
            AccurateBranch::None => 0,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccurateBranch::Ofc5s => "ofc5s",
            AccurateBranch::Ofc1s => "ofc1s",
            AccurateBranch::Ofr => "ofr",
            AccurateBranch::None => "none",
        }
    }
}

impl fmt::Display for RobustBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for AccurateBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RobustBranch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "onr" => Ok(RobustBranch::Onr),
            "onc1s" => Ok(RobustBranch::Onc1s),
            "onc5s" => Ok(RobustBranch::Onc5s),
            "none" => Ok(RobustBranch::None),
            _ => Err(Error::InvalidArgument(format!("unknown robust branch {s}"))),
        }
    }
}

impl FromStr for AccurateBranch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ofc5s" => Ok(AccurateBranch::Ofc5s),
            "ofc1s" => Ok(AccurateBranch::Ofc1s),
            "ofr" => Ok(AccurateBranch::Ofr),
            "none" => Ok(AccurateBranch::None),
            _ => Err(Error::InvalidArgument(format!("unknown accurate branch {s}"))),
        }
    }
}

/// Noise model of the simulator box head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxHeadConfig {
    /// Offset std as a fraction of the object size at the object center.
    pub box_noise: f64,
    /// Relative noise growth per unit of normalized distance from the center.
    pub distance_growth: f64,
    /// Normalized distance beyond which a cell regresses nothing.
    pub reach: f64,
    pub iou_noise: f64,
}

impl Default for BoxHeadConfig {
    fn default() -> Self {
        Self { box_noise: 0.1, distance_growth: 0.5, reach: 1.5, iou_noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub mu: f64,
    pub voting: bool,
    pub vote_epsilon: f64,
    pub vote_sigma: f64,
    pub window_influence: f64,
    pub penalty_k: f64,
    pub smooth_lr: f64,
    pub robust_branch: RobustBranch,
    pub accurate_branch: AccurateBranch,
    /// Side of the square search crop, in cells.
    pub search_cells: usize,
    /// Horizontal shift of the augmented initial samples, in cells.
    pub augment_shift: usize,
    pub augment_scale: f64,
    pub weights: LayerWeights,
    pub box_head: BoxHeadConfig,
    pub learner: OnlineLearnerConfig,
    pub labels: LabelConfig,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mu: 0.8,
            voting: true,
            vote_epsilon: 0.01,
            vote_sigma: 0.0025,
            window_influence: 0.42,
            penalty_k: 0.04,
            smooth_lr: 0.3,
            robust_branch: RobustBranch::Onr,
            accurate_branch: AccurateBranch::Ofc5s,
            search_cells: 25,
            augment_shift: 4,
            augment_scale: 1.05,
            weights: LayerWeights::default(),
            box_head: BoxHeadConfig::default(),
            learner: OnlineLearnerConfig::default(),
            labels: LabelConfig::default(),
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mu) || !unit(self.window_influence) || !unit(self.smooth_lr) {
            return Err(Error::InvalidArgument("mu, window_influence and smooth_lr must lie in [0, 1]".into()));
        }
        if !(self.vote_epsilon > 0.0 && self.vote_epsilon < 1.0) || !(self.vote_sigma > 0.0) {
            return Err(Error::InvalidArgument("need vote_epsilon in (0, 1) and vote_sigma > 0".into()));
        }
        if !(self.penalty_k >= 0.0) {
            return Err(Error::InvalidArgument("penalty_k must be non-negative".into()));
        }
        if self.robust_branch == RobustBranch::None && self.accurate_branch == AccurateBranch::None {
            return Err(Error::InvalidArgument("at least one branch must be enabled".into()));
        }
        if self.search_cells < FILTER_SIZE + 2 {
            return Err(Error::InvalidArgument(format!("search_cells must be at least {}", FILTER_SIZE + 2)));
        }
        if !(self.augment_scale > 0.0) {
            return Err(Error::InvalidArgument("augment_scale must be positive".into()));
        }
        let h = &self.box_head;
        if [h.box_noise, h.distance_growth, h.reach, h.iou_noise].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("box head parameters must be non-negative".into()));
        }
        self.learner.validate()?;
        self.labels.validate()
    }

    /// Fusion weight actually applied given the enabled branches.
    pub fn effective_mu(&self) -> f64 {
        match (self.robust_branch, self.accurate_branch) {
            (RobustBranch::None, _) => 0.0,
            (_, AccurateBranch::None) => 1.0,
            _ => self.mu,
        }
    }

    pub fn fused_anchors(&self) -> usize {
        self.robust_branch.filters().max(self.accurate_branch.anchors()).max(1)
    }
}

impl TrackerConfig {
    /// Pseudo-labels and residual parameters of the robust branch for a
    /// target seen through `region`; `shape_ref` fixes the anchor shapes.
    pub fn robust_labels(&self, region: &SearchRegion, target: &BBox, shape_ref: &BBox) -> Result<(LabelMap, Vec<ResidualParams>)> {
        let cfg = self;
        match cfg.robust_branch {
            RobustBranch::Onr => {
                let grid = region.score_grid(vec![AnchorShape { w: shape_ref.w, h: shape_ref.h }])?;
                let center = grid.to_grid(target.cx, target.cy);
                let n = region.score_size();
                let sigma = cfg.labels.sigma_for(target, grid.stride);
                let label = gaussian_label(n, n, center, sigma)?;
                let radius = 0.5 * (target.w * target.h).sqrt() / grid.stride;
                let params = regression_params(&label.0, center, radius);
                Ok((label, vec![params]))
            }
            RobustBranch::Onc1s | RobustBranch::Onc5s => {
                let shapes = AnchorShape::presets_around(cfg.robust_branch.filters(), shape_ref)?;
                let grid = region.score_grid(shapes)?;
                let label = assign_bernoulli_iou(&grid, target, &cfg.labels);
                let params = (0..grid.num_anchors()).map(|a| classification_params(&label.0.slice(a))).collect();
                Ok((label, params))
            }
            RobustBranch::None => Err(Error::InvalidArgument("robust branch disabled".into())),
        }
    }

    /// Supervision of the robust branch at `gt` on a frame's grid, for
    /// heatmap metrics.
    pub fn robust_target(&self, result: &FrameResult, gt: &BBox) -> Result<LabelMap> {
        Ok(self.robust_labels(&result.region, gt, &result.bbox)?.0)
    }

    /// Gaussian label centered on `gt` over the score grid of `region`.
    pub fn gaussian_target(&self, region: &SearchRegion, gt: &BBox) -> Result<LabelMap> {
        let grid = region.score_grid(vec![AnchorShape { w: gt.w, h: gt.h }])?;
        let n = region.score_size();
        gaussian_label(n, n, grid.to_grid(gt.cx, gt.cy), self.labels.sigma_for(gt, grid.stride))
    }

    /// Supervision of the accurate branch at `gt`: Gaussian for OFR, ATSS for
    /// the classification variants.
    pub fn accurate_target(&self, result: &FrameResult, gt: &BBox) -> Result<LabelMap> {
        let region = &result.region;
        match self.accurate_branch {
            AccurateBranch::Ofr => self.gaussian_target(region, gt),
            AccurateBranch::Ofc1s | AccurateBranch::Ofc5s => {
                let a = self.accurate_branch.anchors();
                let shapes: Vec<AnchorShape> = result.grid.shapes.iter().take(a).copied().collect();
                let shapes = if shapes.len() == a { shapes } else { AnchorShape::presets_around(a, gt)? };
                let grid = region.score_grid(shapes)?;
                Ok(assign_atss(&grid, gt, self.labels.atss_topk(a), self.labels.atss_variant)?.labels)
            }
            AccurateBranch::None => Err(Error::InvalidArgument("accurate branch disabled".into())),
        }
    }
}

/// Square search window resampled from the feature grid around a center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRegion {
    /// Pixel center.
    pub center: (f64, f64),
    /// Magnification; content appears `scale` times larger in the crop.
    pub scale: f64,
    pub cells: usize,
    pub stride: f64,
}

impl SearchRegion {
    fn cell_pitch(&self) -> f64 {
        self.stride / self.scale
    }

    /// Pixel position of crop cell `(r, c)`.
    pub fn crop_pixel(&self, r: f64, c: f64) -> (f64, f64) {
        let mid = (self.cells as f64 - 1.0) / 2.0;
        (self.center.0 + (c - mid) * self.cell_pitch(), self.center.1 + (r - mid) * self.cell_pitch())
    }

    pub fn crop(&self, layer: &FeatureMap) -> FeatureMap {
        let n = self.cells;
        let coords: Vec<(f64, f64)> = (0..n * n)
            .map(|k| {
                let (x, y) = self.crop_pixel((k / n) as f64, (k % n) as f64);
                (y / self.stride - 0.5, x / self.stride - 0.5)
            })
            .collect();
        let mut out = FeatureMap::zeros(layer.channels, n, n);
        for c in 0..layer.channels {
            for (k, &(gy, gx)) in coords.iter().enumerate() {
                out.data[c * n * n + k] = layer.sample(c, gy, gx);
            }
        }
        out
    }

    pub fn score_size(&self) -> usize {
        self.cells - FILTER_SIZE + 1
    }

    /// Anchor grid of the score map: score cell `(i, j)` sits at crop cell
    /// `(i + 2, j + 2)`.
    pub fn score_grid(&self, shapes: Vec<AnchorShape>) -> Result<AnchorGrid> {
        let half = (FILTER_SIZE / 2) as f64;
        let (x, y) = self.crop_pixel(half, half);
        let n = self.score_size();
        let shapes = shapes.into_iter().map(|s| AnchorShape { w: s.w / self.scale, h: s.h / self.scale }).collect();
        Ok(make_anchor_grid(n, n, self.cell_pitch(), shapes)?.with_origin(x, y))
    }

    /// Box in frame pixels as seen inside the crop, in local crop pixels
    /// whose cell `k` is centered at `(k + 0.5) * stride`.
    pub fn local_box(&self, b: &BBox) -> BBox {
        let mid = self.cells as f64 * self.stride / 2.0;
        BBox {
            cx: mid + (b.cx - self.center.0) * self.scale,
            cy: mid + (b.cy - self.center.1) * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }
}

/// Dense predicted IoU per anchor, in `[0, 1]`.
pub type IoUMap = Heatmap;

/// Per-frame inputs. `oracle_boxes` lists the visible object boxes when the
/// simulator box head is in use; without it boxes come from the score map.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub features: &'a FeaturePyramid,
    pub oracle_boxes: Option<&'a [BBox]>,
    pub frame_size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub bbox: BBox,
    /// Fused score at the selected cell.
    pub peak: f64,
    pub lost: bool,
    pub distractor: bool,
    pub update: UpdateKind,
    pub vote_fallback: bool,
    pub grid: AnchorGrid,
    pub fused: Heatmap,
    pub robust: Option<Heatmap>,
    pub accurate: Option<Heatmap>,
    pub region: SearchRegion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub current_box: BBox,
    pub frame_index: usize,
    pub filters: Vec<OnlineFilter>,
    pub support: SupportSet,
    pub template_kernels: Vec<FeatureMap>,
    pub layer_weights: LayerWeights,
    pub lost: bool,
    pub initial_peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub state: TrackerState,
}

/// `mu * broadcast(robust) + (1 - mu) * accurate` and its argmax.
pub fn localize(robust: &Heatmap, accurate: &Heatmap, mu: f64) -> Result<(Heatmap, Cell)> {
    if !robust.same_spatial(accurate) {
        return Err(Error::ShapeMismatch("robust and accurate maps differ spatially".into()));
    }
    let a = robust.anchors.max(accurate.anchors);
    let lift = |h: &Heatmap| -> Result<Heatmap> {
        if h.anchors == a {
            Ok(h.clone())
        } else {
            broadcast_anchor(h, a)
        }
    };
    let (r, s) = (lift(robust)?, lift(accurate)?);
    let fused = Heatmap {
        values: r.values.iter().zip(&s.values).map(|(x, y)| mu * x + (1.0 - mu) * y).collect(),
        ..r
    };
    let (peak, _) = argmax_peak(&fused);
    Ok((fused, peak))
}

/// Box decoded at the peak cell and anchor.
pub fn regress_direct(peak: Cell, boxes: &DenseBoxes) -> BBox {
    boxes.decode(peak.0, peak.1, peak.2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub bbox: BBox,
    /// True when the weight mass vanished and `b_star` was returned.
    pub fallback: bool,
    pub neighbors: usize,
}

/// Score voting around `b_star`: boxes with IoU above `vote_epsilon` are
/// averaged in center form, weighted by the clamped fused score, the
/// proximity prior `exp(-(1 - IoU)^2 / vote_sigma)` and the predicted IoU.
pub fn score_vote(boxes: &DenseBoxes, iou_map: &IoUMap, fused: &Heatmap, b_star: &BBox, cfg: &TrackerConfig) -> Result<Vote> {
    let n = boxes.grid.len();
    if iou_map.len() != n || fused.len() != n {
        return Err(Error::ShapeMismatch("voting inputs differ in size".into()));
    }
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    let mut neighbors = 0;
    for k in 0..n {
        let b = boxes.decode_linear(k);
        let overlap = iou(&b, b_star);
        if overlap <= cfg.vote_epsilon {
            continue;
        }
        neighbors += 1;
        let w = fused.values[k].max(0.0) * (-(1.0 - overlap).powi(2) / cfg.vote_sigma).exp() * iou_map.values[k];
        if w <= 0.0 {
            continue;
        }
        total += w;
        for (a, v) in acc.iter_mut().zip([b.cx, b.cy, b.w, b.h]) {
            *a += w * v;
        }
    }
    if total <= VOTE_DENOM_EPS {
        return Ok(Vote { bbox: *b_star, fallback: true, neighbors });
    }
    let bbox = BBox { cx: acc[0] / total, cy: acc[1] / total, w: acc[2] / total, h: acc[3] / total };
    Ok(Vote { bbox, fallback: false, neighbors })
}

/// Scale and aspect change penalty of a candidate against the previous box.
pub fn change_penalty(candidate: &BBox, prev: &BBox, k: f64) -> f64 {
    let sz = |w: f64, h: f64| {
        let p = (w + h) / 2.0;
        ((w + p) * (h + p)).sqrt()
    };
    let change = |r: f64| r.max(1.0 / r);
    let s = change(sz(candidate.w, candidate.h) / sz(prev.w, prev.h));
    let r = change((candidate.w / candidate.h) / (prev.w / prev.h));
    (-(r * s - 1.0) * k).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Postprocessed {
    pub penalty: Heatmap,
    pub windowed: Heatmap,
    pub peak: Cell,
}

impl Postprocessed {
    /// Size-smoothing rate `smooth_lr * p(y*) * s(y*)`, clamped to `[0, 1]`.
    pub fn smoothing_rate(&self, fused: &Heatmap, cfg: &TrackerConfig) -> f64 {
        let (i, j, a) = self.peak;
        (cfg.smooth_lr * self.penalty.get(i, j, a) * fused.get(i, j, a)).clamp(0.0, 1.0)
    }
}

/// Penalize shape changes, blend in a cosine window and pick the peak.
pub fn postprocess(fused: &Heatmap, boxes: &DenseBoxes, prev_box: &BBox, cfg: &TrackerConfig) -> Result<Postprocessed> {
    if boxes.grid.len() != fused.len() || boxes.grid.height != fused.height {
        return Err(Error::ShapeMismatch("boxes and fused map differ".into()));
    }
    let penalty = Heatmap {
        values: (0..fused.len()).map(|k| change_penalty(&boxes.decode_linear(k), prev_box, cfg.penalty_k)).collect(),
        ..fused.clone()
    };
    let window = cosine_window(fused.height, fused.width);
    let wi = cfg.window_influence;
    let windowed = Heatmap::from_fn(fused.height, fused.width, fused.anchors, |i, j, a| {
        penalty.get(i, j, a) * fused.get(i, j, a) * (1.0 - wi) + window.get(i, j, 0) * wi
    });
    let (peak, _) = argmax_peak(&windowed);
    Ok(Postprocessed { penalty, windowed, peak })
}

/// `prev * (1 - eta) + voted * eta` on the size, voted center.
pub fn smooth_box(prev: &BBox, voted: &BBox, eta: f64) -> BBox {
    BBox { cx: voted.cx, cy: voted.cy, w: prev.w * (1.0 - eta) + voted.w * eta, h: prev.h * (1.0 - eta) + voted.h * eta }
}

fn clamp_to_frame(b: &BBox, frame: (f64, f64)) -> BBox {
    let w = b.w.clamp(MIN_BOX_SIDE, frame.0.max(MIN_BOX_SIDE));
    let h = b.h.clamp(MIN_BOX_SIDE, frame.1.max(MIN_BOX_SIDE));
    BBox { cx: b.cx.clamp(0.0, frame.0), cy: b.cy.clamp(0.0, frame.1), w, h }
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulator box head: each cell regresses the visible object nearest in
/// normalized distance, with noise growing away from its center; the IoU
/// head reports the true overlap with that object plus clamped noise.
pub fn oracle_box_head(grid: &AnchorGrid, objects: &[BBox], cfg: &BoxHeadConfig, seed: u64) -> Result<(DenseBoxes, IoUMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut offsets = Vec::with_capacity(grid.len());
    let mut ious = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (x, y) = grid.cell_center(i, j);
            let nearest = objects
                .iter()
                .map(|o| (o, ((x - o.cx) / (o.w / 2.0)).hypot((y - o.cy) / (o.h / 2.0))))
                .filter(|(_, d)| *d <= cfg.reach)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            for a in 0..grid.num_anchors() {
                let anchor = grid.anchor(i, j, a);
                let e: [f64; 5] = std::array::from_fn(|_| unit.sample(&mut rng));
                match nearest {
                    Some((o, d)) => {
                        let s = cfg.box_noise * (1.0 + cfg.distance_growth * d);
                        let pred = BBox {
                            cx: o.cx + e[0] * s * o.w,
                            cy: o.cy + e[1] * s * o.h,
                            w: o.w * (e[2] * s).exp(),
                            h: o.h * (e[3] * s).exp(),
                        };
                        offsets.push(encode_offsets(&anchor, &pred));
                        ious.push((iou(&pred, o) + e[4] * cfg.iou_noise).clamp(0.0, 1.0));
                    }
                    None => {
                        offsets.push([0.0; 4]);
                        ious.push((e[4] * cfg.iou_noise).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    let iou_map = Heatmap::new(grid.height, grid.width, grid.num_anchors(), ious)?;
    Ok((DenseBoxes::new(grid.clone(), offsets)?, iou_map))
}

/// Score-driven box head: the center shift at each cell comes from a 3x3
/// quadratic fit of the anchor-max score map, sizes stay at the anchor; the
/// IoU head is the share of positive score mass inside each box, scaled so
/// the best box scores 1.
pub fn score_box_head(grid: &AnchorGrid, fused: &Heatmap) -> Result<(DenseBoxes, IoUMap)> {
    let m = fused.max_over_anchors();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, m.height as isize - 1) as usize;
        let j = j.clamp(0, m.width as isize - 1) as usize;
        m.get(i, j, 0)
    };
    let fit = |l: f64, c: f64, r: f64| {
        let d = l - 2.0 * c + r;
        if d < 0.0 {
            (0.5 * (l - r) / d).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let mut offsets = Vec::with_capacity(grid.len());
    let mut boxes = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (ii, jj) = (i as isize, j as isize);
            let c = at(ii, jj);
            let dx = fit(at(ii, jj - 1), c, at(ii, jj + 1));
            let dy = fit(at(ii - 1, jj), c, at(ii + 1, jj));
            for a in 0..grid.num_anchors() {
                let anchor = grid.anchor(i, j, a);
                let pred = anchor.translate(dx * grid.stride, dy * grid.stride);
                offsets.push(encode_offsets(&anchor, &pred));
                boxes.push(pred);
            }
        }
    }
    let mass: Vec<f64> = m.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = mass.iter().sum();
    let mut share: Vec<f64> = boxes
        .iter()
        .map(|b| {
            if total <= 0.0 {
                return 0.0;
            }
            let mut inside = 0.0;
            for i in 0..grid.height {
                for j in 0..grid.width {
                    let (x, y) = grid.cell_center(i, j);
                    if b.contains_point(x, y) {
                        inside += mass[i * grid.width + j];
                    }
                }
            }
            inside / total
        })
        .collect();
    let best = share.iter().copied().fold(0.0, f64::max);
    if best > 0.0 {
        share.iter_mut().for_each(|v| *v = (*v / best).clamp(0.0, 1.0));
    }
    let iou_map = Heatmap::new(grid.height, grid.width, grid.num_anchors(), share)?;
    Ok((DenseBoxes::new(grid.clone(), offsets)?, iou_map))
}

fn fuse(layers: &[FeatureMap], beta: &[f64]) -> FeatureMap {
    let mut out = FeatureMap::zeros(layers[0].channels, layers[0].height, layers[0].width);
    for (l, b) in layers.iter().zip(beta) {
        for (o, v) in out.data.iter_mut().zip(&l.data) {
            *o += b * v;
        }
    }
    out
}

/// Shape prior of anchor `a` relative to the previous box: IoU of the two
/// shapes when concentric.
fn shape_prior(shape: &AnchorShape, prev: &BBox) -> f64 {
    let inter = shape.w.min(prev.w) * shape.h.min(prev.h);
    inter / (shape.w * shape.h + prev.w * prev.h - inter)
}

struct Crops {
    layers: Vec<FeatureMap>,
    fused: FeatureMap,
}

impl Tracker {
    /// Build the template, the augmented support set and the online filters
    /// from the first frame.
    pub fn initialize(first: &FeaturePyramid, gt: &BBox, cfg: &TrackerConfig) -> Result<Tracker> {
        cfg.validate()?;
        first.validate()?;
        cfg.weights.validate(first.layers.len())?;
        if !gt.is_valid() {
            return Err(Error::InvalidBox(format!("{gt:?}")));
        }
        let extent = (first.width() as f64 * first.stride, first.height() as f64 * first.stride);
        if !(gt.cx >= 0.0 && gt.cy >= 0.0 && gt.cx <= extent.0 && gt.cy <= extent.1) {
            return Err(Error::OutsideExtent);
        }
        let region = SearchRegion { center: (gt.cx, gt.cy), scale: 1.0, cells: cfg.search_cells, stride: first.stride };
        let crops = Self::crop_all(&region, first, &cfg.weights);
        let local = region.local_box(gt);
        let template_kernels = crops
            .layers
            .iter()
            .map(|l| template_region(l, &local, first.stride).map(|r| crate::gridmath::adaptive_avg_pool(&r, FILTER_SIZE, FILTER_SIZE)))
            .collect::<Result<Vec<_>>>()?;

        let state = TrackerState {
            current_box: *gt,
            frame_index: 0,
            filters: Vec::new(),
            support: SupportSet::new(cfg.learner.memory)?,
            template_kernels,
            layer_weights: cfg.weights.clone(),
            lost: false,
            initial_peak: 0.0,
        };
        let mut tracker = Tracker { cfg: cfg.clone(), state };

        if cfg.robust_branch != RobustBranch::None {
            let filter = init_filter(&template_region(&crops.fused, &local, first.stride)?);
            tracker.state.filters = vec![filter; cfg.robust_branch.filters()];
            let shift = cfg.augment_shift as f64 * first.stride;
            let variants = [(0.0, 1.0, false), (0.0, 1.0, true), (shift, 1.0, false), (-shift, 1.0, false), (0.0, cfg.augment_scale, false)];
            for (dx, scale, flip) in variants {
                let r = SearchRegion { center: (gt.cx + dx, gt.cy), scale, ..region };
                let fused = fuse(&r_crop_layers(&r, first), &cfg.weights.beta);
                let (feature, target) = if flip {
                    (fused.flip_horizontal(), BBox { cx: 2.0 * r.center.0 - gt.cx, ..*gt })
                } else {
                    (fused, *gt)
                };
                let (label, params) = tracker.cfg.robust_labels(&r, &target, gt)?;
                tracker.state.support.push_initial(feature, label, params, 1.0)?;
            }
            for k in 0..tracker.state.filters.len() {
                let samples = tracker.state.support.samples(k)?;
                let (f, _) = optimize(&tracker.state.filters[k], &samples, cfg.learner.init_iterations, 1.0)?;
                tracker.state.filters[k] = f;
            }
            tracker.state.initial_peak = tracker.robust_map(&crops.fused)?.max();
        } else {
            let shapes = AnchorShape::presets_around(cfg.accurate_branch.anchors(), gt)?;
            let grid = region.score_grid(shapes)?;
            tracker.state.initial_peak = tracker.accurate_map(&crops.layers, &grid, gt)?.max();
        }
        Ok(tracker)
    }

    fn crop_all(region: &SearchRegion, pyr: &FeaturePyramid, weights: &LayerWeights) -> Crops {
        let layers = r_crop_layers(region, pyr);
        let fused = fuse(&layers, &weights.beta);
        Crops { layers, fused }
    }

    fn robust_map(&self, fused: &FeatureMap) -> Result<Heatmap> {
        let maps = self.state.filters.iter().map(|f| f.respond(fused)).collect::<Result<Vec<_>>>()?;
        if maps.len() == 1 {
            return Ok(maps.into_iter().next().expect("one map"));
        }
        let (h, w, a) = (maps[0].height, maps[0].width, maps.len());
        Ok(Heatmap::from_fn(h, w, a, |i, j, k| maps[k].get(i, j, 0)))
    }

    fn accurate_map(&self, layers: &[FeatureMap], grid: &AnchorGrid, prev: &BBox) -> Result<Heatmap> {
        let per_layer = layers
            .iter()
            .zip(&self.state.template_kernels)
            .map(|(l, k)| {
                let energy = k.norm_sq();
                let s = upchannel_xcorr(l, k)?;
                Ok(if energy > KERNEL_ENERGY_EPS { s.map(|v| v / energy) } else { s.map(|_| 0.0) })
            })
            .collect::<Result<Vec<_>>>()?;
        let base = aggregate_layers(&per_layer, &self.state.layer_weights.alpha)?;
        if self.cfg.accurate_branch != AccurateBranch::Ofc5s {
            return Ok(base);
        }
        let prior: Vec<f64> = grid.shapes.iter().map(|s| shape_prior(s, prev)).collect();
        Ok(Heatmap::from_fn(base.height, base.width, prior.len(), |i, j, a| base.get(i, j, 0) * prior[a]))
    }

    /// Track one frame.
    pub fn step(&mut self, input: &FrameInput<'_>) -> Result<FrameResult> {
        let cfg = self.cfg.clone();
        input.features.validate()?;
        self.state.frame_index += 1;
        let frame = self.state.frame_index;
        let prev = self.state.current_box;
        let region = SearchRegion { center: (prev.cx, prev.cy), scale: 1.0, cells: cfg.search_cells, stride: input.features.stride };
        let crops = Self::crop_all(&region, input.features, &self.state.layer_weights);
        let shapes = AnchorShape::presets_around(cfg.fused_anchors(), &prev)?;
        let grid = region.score_grid(shapes)?;

        let robust = match cfg.robust_branch {
            RobustBranch::None => None,
            _ => Some(self.robust_map(&crops.fused)?),
        };
        let accurate = match cfg.accurate_branch {
            AccurateBranch::None => None,
            b => {
                let g = region.score_grid(AnchorShape::presets_around(b.anchors(), &prev)?)?;
                Some(self.accurate_map(&crops.layers, &g, &prev)?)
            }
        };
        let (fused, _) = match (&robust, &accurate) {
            (Some(r), Some(a)) => localize(r, a, cfg.effective_mu())?,
            (Some(only), None) | (None, Some(only)) => {
                let f = if only.anchors == grid.num_anchors() { only.clone() } else { broadcast_anchor(only, grid.num_anchors())? };
                let (p, _) = argmax_peak(&f);
                (f, p)
            }
            (None, None) => return Err(Error::InvalidArgument("no branch enabled".into())),
        };

        let (boxes, iou_map) = match input.oracle_boxes {
            Some(objects) => oracle_box_head(&grid, objects, &cfg.box_head, frame_seed(cfg.seed, frame))?,
            None => score_box_head(&grid, &fused)?,
        };
        let post = postprocess(&fused, &boxes, &prev, &cfg)?;
        let b_star = regress_direct(post.peak, &boxes);
        let vote = if cfg.voting {
            score_vote(&boxes, &iou_map, &fused, &b_star, &cfg)?
        } else {
            Vote { bbox: b_star, fallback: false, neighbors: 1 }
        };
        let eta = post.smoothing_rate(&fused, &cfg);
        let new_box = clamp_to_frame(&smooth_box(&prev, &vote.bbox, eta), input.frame_size);
        let (pi, pj, pa) = post.peak;
        let peak = fused.get(pi, pj, pa);

        let monitor = robust.as_ref().or(accurate.as_ref()).expect("a branch is enabled");
        let lost = monitor.max() < cfg.learner.lost_ratio * self.state.initial_peak;
        let mut result = FrameResult {
            frame,
            bbox: prev,
            peak,
            lost,
            distractor: false,
            update: UpdateKind::None,
            vote_fallback: vote.fallback,
            grid,
            fused,
            robust,
            accurate,
            region,
        };
        self.state.lost = lost;
        if lost {
            return Ok(result);
        }
        self.state.current_box = new_box;
        result.bbox = new_box;

        if let Some(r) = &result.robust {
            let g = region.score_grid(vec![AnchorShape { w: new_box.w, h: new_box.h }])?;
            let (ti, tj) = g.to_grid(new_box.cx, new_box.cy);
            let n = region.score_size() as f64 - 1.0;
            let cell = (ti.round().clamp(0.0, n) as usize, tj.round().clamp(0.0, n) as usize);
            let distractor = detect_distractor(r, cell, &cfg.learner);
            let update = schedule_update(frame, distractor, false, &cfg.learner);
            let weight = if matches!(update, UpdateKind::Hard { .. }) { cfg.learner.hard_push_weight } else { 1.0 };
            let (label, params) = cfg.robust_labels(&region, &new_box, &prev)?;
            self.state.support.push(crops.fused, label, params, weight)?;
            if let UpdateKind::Periodic { lr, iterations } | UpdateKind::Hard { lr, iterations } = update {
                for k in 0..self.state.filters.len() {
                    let samples = self.state.support.samples(k)?;
                    let (f, _) = optimize(&self.state.filters[k], &samples, iterations, lr)?;
                    self.state.filters[k] = f;
                }
            }
            result.distractor = distractor;
            result.update = update;
        }
        Ok(result)
    }
}

fn r_crop_layers(region: &SearchRegion, pyr: &FeaturePyramid) -> Vec<FeatureMap> {
    pyr.layers.iter().map(|l| region.crop(l)).collect()
}

/// Inverse of [`encode_offsets`] for a whole grid, exposed for callers that
/// build dense boxes from absolute predictions.
pub fn dense_from_boxes(grid: &AnchorGrid, boxes: &[BBox]) -> Result<DenseBoxes> {
    if boxes.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!("{} boxes for {} anchors", boxes.len(), grid.len())));
    }
    let anchors = grid.anchors();
    DenseBoxes::new(grid.clone(), anchors.iter().zip(boxes).map(|(a, b)| encode_offsets(a, b)).collect())
}
