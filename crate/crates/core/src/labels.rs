//! Training and pseudo-label generation: Gaussian regression targets,
//! IoU-threshold and ATSS Bernoulli assignment, online pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorGrid, BBox};
use crate::gridmath::Heatmap;

/// Label value for cells excluded from losses and counts.
pub const IGNORE: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtssVariant {
    /// Candidates are the anchors whose centers are closest to the target center.
    MinL2,
    /// Candidates are the anchors with the highest IoU against the target.
    MaxIoU,
}

impl std::str::FromStr for AtssVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MinL2" | "min_l2" => Ok(Self::MinL2),
            "MaxIoU" | "max_iou" => Ok(Self::MaxIoU),
            _ => Err(Error::InvalidArgument(format!("unknown ATSS variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for AtssVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MinL2 => "MinL2",
            Self::MaxIoU => "MaxIoU",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Gaussian label width in cells; `None` derives it from the target size.
    pub gaussian_sigma: Option<f64>,
    pub iou_pos_thresh: f64,
    pub iou_neg_thresh: f64,
    pub atss_topk_5s: usize,
    pub atss_topk_1s: usize,
    pub atss_variant: AtssVariant,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: None,
            iou_pos_thresh: 0.8,
            iou_neg_thresh: 0.3,
            atss_topk_5s: 15,
            atss_topk_1s: 11,
            atss_variant: AtssVariant::MaxIoU,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.iou_neg_thresh
            && self.iou_neg_thresh < self.iou_pos_thresh
            && self.iou_pos_thresh <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds need 0 <= neg ({}) < pos ({}) <= 1",
                self.iou_neg_thresh, self.iou_pos_thresh
            )));
        }
        if self.atss_topk_1s == 0 || self.atss_topk_5s == 0 {
            return Err(Error::InvalidArgument("ATSS top-k must be at least 1".into()));
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("gaussian sigma {s} must be positive")));
            }
        }
        Ok(())
    }

    /// Label width in cells: the configured value, or an eighth of the
    /// target's short side (in cells) with a floor of one cell.
    pub fn sigma_for(&self, target: &BBox, stride: f64) -> f64 {
        self.gaussian_sigma
            .unwrap_or_else(|| (target.w.min(target.h) / stride / 8.0).max(1.0))
    }

    pub fn atss_topk(&self, anchors: usize) -> usize {
        if anchors > 1 {
            self.atss_topk_5s
        } else {
            self.atss_topk_1s
        }
    }
}

/// Label grid with values in `{-1} ∪ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap(pub Heatmap);

impl LabelMap {
    pub fn map(&self) -> &Heatmap {
        &self.0
    }

    pub fn positives(&self) -> usize {
        self.0.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let h = &self.0;
        LabelMap(Heatmap::from_fn(h.height, h.width, h.anchors, |i, j, a| {
            h.get(i, h.width - 1 - j, a)
        }))
    }
}

/// Gaussian centered at continuous grid coordinates `(row, col)`.
pub fn gaussian_label(grid_h: usize, grid_w: usize, center: (f64, f64), sigma: f64) -> Result<LabelMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let (cy, cx) = center;
    let denom = 2.0 * sigma * sigma;
    Ok(LabelMap(Heatmap::from_fn(grid_h, grid_w, 1, |i, j, _| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        (-(dy * dy + dx * dx) / denom).exp()
    })))
}

/// Pseudo-label for an online sample: a Gaussian at the current prediction.
pub fn online_pseudo_label(
    grid_h: usize,
    grid_w: usize,
    predicted_center: (f64, f64),
    sigma: f64,
) -> Result<LabelMap> {
    gaussian_label(grid_h, grid_w, predicted_center, sigma)
}

fn anchor_ious(anchors: &AnchorGrid, gt: &BBox) -> Vec<f64> {
    anchors.anchors().iter().map(|a| iou(a, gt)).collect()
}

/// First index of the maximum.
fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..v.len() {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

fn to_label_map(anchors: &AnchorGrid, values: Vec<f64>) -> LabelMap {
    LabelMap(Heatmap {
        height: anchors.height,
        width: anchors.width,
        anchors: anchors.num_anchors(),
        values,
    })
}

/// Band labels from precomputed IoUs; the first max-IoU entry is promoted.
pub(crate) fn bernoulli_from_ious(ious: &[f64], cfg: &LabelConfig) -> Vec<f64> {
    let mut values: Vec<f64> = ious
        .iter()
        .map(|&v| {
            if v > cfg.iou_pos_thresh {
                1.0
            } else if v < cfg.iou_neg_thresh {
                0.0
            } else {
                IGNORE
            }
        })
        .collect();
    if !ious.is_empty() {
        values[first_argmax(ious)] = 1.0;
    }
    values
}

/// IoU-threshold assignment: positive above `iou_pos_thresh` plus the single
/// best anchor, negative below `iou_neg_thresh`, ignored in between.
pub fn assign_bernoulli_iou(anchors: &AnchorGrid, gt: &BBox, cfg: &LabelConfig) -> LabelMap {
    to_label_map(anchors, bernoulli_from_ious(&anchor_ious(anchors, gt), cfg))
}

/// Outcome of ATSS candidate selection, exposed for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct AtssAssignment {
    pub labels: LabelMap,
    pub candidates: Vec<usize>,
    pub threshold: f64,
    pub fallback: bool,
}

pub(crate) struct AtssSelection {
    pub values: Vec<f64>,
    pub candidates: Vec<usize>,
    pub threshold: f64,
    pub fallback: bool,
}

/// Core of ATSS on flat arrays. `rank_key` orders candidates ascending (ties
/// by index); `inside` flags anchors whose center lies in the target.
pub(crate) fn atss_select(ious: &[f64], rank_key: &[f64], inside: &[bool], topk: usize) -> AtssSelection {
    let n = ious.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rank_key[a].total_cmp(&rank_key[b]).then(a.cmp(&b)));
    order.truncate(topk);
    let k = order.len() as f64;
    let mean = order.iter().map(|&i| ious[i]).sum::<f64>() / k;
    let var = order.iter().map(|&i| (ious[i] - mean).powi(2)).sum::<f64>() / k;
    let threshold = mean + var.sqrt();

    let mut values = vec![0.0; n];
    let mut any = false;
    for &i in &order {
        if ious[i] >= threshold && inside[i] {
            values[i] = 1.0;
            any = true;
        }
    }
    if !any {
        values[first_argmax(ious)] = 1.0;
    }
    AtssSelection { values, candidates: order, threshold, fallback: !any }
}

/// Adaptive training sample selection.
///
/// Candidates are the `topk` anchors ranked by the variant's criterion (ties
/// by linear index). The IoU threshold is the mean plus population standard
/// deviation of the candidate IoUs; candidates at or above it whose centers
/// lie inside `gt` become positive. With no positive, the global max-IoU
/// anchor is marked positive.
pub fn assign_atss(
    anchors: &AnchorGrid,
    gt: &BBox,
    topk: usize,
    variant: AtssVariant,
) -> Result<AtssAssignment> {
    let n = anchors.len();
    if topk == 0 || topk > n {
        return Err(Error::InvalidArgument(format!("top-k {topk} outside 1..={n}")));
    }
    let boxes = anchors.anchors();
    let ious: Vec<f64> = boxes.iter().map(|a| iou(a, gt)).collect();
    let rank_key: Vec<f64> = match variant {
        AtssVariant::MaxIoU => ious.iter().map(|v| -v).collect(),
        AtssVariant::MinL2 => boxes
            .iter()
            .map(|a| (a.cx - gt.cx).powi(2) + (a.cy - gt.cy).powi(2))
            .collect(),
    };
    let inside: Vec<bool> = boxes.iter().map(|a| gt.contains_point(a.cx, a.cy)).collect();
    let sel = atss_select(&ious, &rank_key, &inside, topk);
    Ok(AtssAssignment {
        labels: to_label_map(anchors, sel.values),
        candidates: sel.candidates,
        threshold: sel.threshold,
        fallback: sel.fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_anchor_grid, AnchorShape};
    use proptest::prelude::*;

    #[test]
    fn gaussian_examples() {
        let g = gaussian_label(7, 7, (3.0, 3.0), 2.0).unwrap();
        assert_eq!(g.0.get(3, 3, 0), 1.0);
        for d in 1..3 {
            assert_eq!(g.0.get(3, 3 + d, 0), g.0.get(3, 3 - d, 0));
            assert_eq!(g.0.get(3 + d, 3, 0), g.0.get(3 - d, 3, 0));
        }
        assert!((g.0.get(3, 5, 0) - 0.606531).abs() < 1e-6);
        assert!(gaussian_label(3, 3, (1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn pseudo_label_matches_gaussian() {
        let p = online_pseudo_label(5, 5, (2.0, 2.0), 1.3).unwrap();
        assert_eq!(p, gaussian_label(5, 5, (2.0, 2.0), 1.3).unwrap());
        assert_eq!(p.0.get(2, 2, 0), 1.0);

        let sigma: f64 = 1.5;
        let off = online_pseudo_label(5, 5, (2.5, 2.5), sigma).unwrap();
        let peak = (-0.25 / (sigma * sigma)).exp();
        for (i, j) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert!((off.0.get(i, j, 0) - peak).abs() < 1e-15);
        }
        assert!((off.0.max() - peak).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_bands_from_ious() {
        let out = bernoulli_from_ious(&[0.85, 0.7, 0.5, 0.2, 0.0], &LabelConfig::default());
        assert_eq!(out, vec![1.0, IGNORE, IGNORE, 0.0, 0.0]);
        // Max-IoU promotion when nothing clears the positive threshold.
        let out = bernoulli_from_ious(&[0.5, 0.6, 0.1], &LabelConfig::default());
        assert_eq!(out, vec![IGNORE, 1.0, 0.0]);
    }

    #[test]
    fn bernoulli_on_grid() {
        let shapes = vec![AnchorShape { w: 16.0, h: 16.0 }];
        let grid = make_anchor_grid(9, 9, 8.0, shapes).unwrap();
        let same = grid.anchor(4, 4, 0);
        let labels = assign_bernoulli_iou(&grid, &same, &LabelConfig::default());
        assert_eq!(labels.0.get(4, 4, 0), 1.0);
        assert_eq!(labels.0.get(0, 0, 0), 0.0);
        // Far-away target: only the promoted best anchor is positive.
        let far = BBox::new(1000.0, 1000.0, 10.0, 10.0).unwrap();
        let labels = assign_bernoulli_iou(&grid, &far, &LabelConfig::default());
        assert_eq!(labels.positives(), 1);
        assert_eq!(labels.0.values[0], 1.0);
    }

    #[test]
    fn atss_threshold_example() {
        let ious = [0.9, 0.6, 0.5];
        let key: Vec<f64> = ious.iter().map(|v| -v).collect();
        let sel = atss_select(&ious, &key, &[true; 3], 3);
        assert!((sel.threshold - 0.836634).abs() < 1e-6);
        assert_eq!(sel.values, vec![1.0, 0.0, 0.0]);
        assert!(!sel.fallback);
    }

    #[test]
    fn atss_single_anchor_equal_to_gt() {
        let grid = make_anchor_grid(1, 1, 8.0, vec![AnchorShape { w: 20.0, h: 10.0 }])
            .unwrap()
            .with_origin(50.0, 40.0);
        let gt = grid.anchor(0, 0, 0);
        for variant in [AtssVariant::MinL2, AtssVariant::MaxIoU] {
            let out = assign_atss(&grid, &gt, 1, variant).unwrap();
            assert_eq!(out.threshold, 1.0);
            assert_eq!(out.labels.0.values, vec![1.0]);
            assert!(!out.fallback);
        }
    }

    #[test]
    fn atss_fallback_when_far() {
        let grid = make_anchor_grid(5, 5, 8.0, AnchorShape::presets(5, 16.0).unwrap()).unwrap();
        let far = BBox::new(900.0, 900.0, 10.0, 10.0).unwrap();
        let out = assign_atss(&grid, &far, 15, AtssVariant::MaxIoU).unwrap();
        assert!(out.fallback);
        assert_eq!(out.labels.positives(), 1);
        assert!(assign_atss(&grid, &far, 0, AtssVariant::MinL2).is_err());
        assert!(assign_atss(&grid, &far, 126, AtssVariant::MinL2).is_err());
    }

    fn arb_gt() -> impl Strategy<Value = BBox> {
        (8.0..60.0f64, 8.0..60.0f64, 6.0..40.0f64, 6.0..40.0f64)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn assignments_have_a_positive_and_valid_values(gt in arb_gt(), five in any::<bool>(), minl2 in any::<bool>()) {
            let count = if five { 5 } else { 1 };
            let grid = make_anchor_grid(8, 8, 8.0, AnchorShape::presets(count, 20.0).unwrap()).unwrap();
            let cfg = LabelConfig::default();
            let b = assign_bernoulli_iou(&grid, &gt, &cfg);
            prop_assert!(b.positives() >= 1);
            prop_assert!(b.0.values.iter().all(|&v| v == 1.0 || v == 0.0 || v == IGNORE));
            let variant = if minl2 { AtssVariant::MinL2 } else { AtssVariant::MaxIoU };
            let a = assign_atss(&grid, &gt, cfg.atss_topk(count), variant).unwrap();
            prop_assert!(a.labels.positives() >= 1);
            prop_assert!(a.labels.0.values.iter().all(|&v| v == 1.0 || v == 0.0));
        }

        #[test]
        fn iou_assignment_scale_invariant(gt in arb_gt(), s in 0.25..4.0f64) {
            let shapes = AnchorShape::presets(5, 20.0).unwrap();
            let grid = make_anchor_grid(8, 8, 8.0, shapes.clone()).unwrap().with_origin(2.0, 3.0);
            let scaled_shapes = shapes.iter().map(|a| AnchorShape { w: a.w * s, h: a.h * s }).collect();
            let scaled = make_anchor_grid(8, 8, 8.0 * s, scaled_shapes).unwrap().with_origin(2.0 * s, 3.0 * s);
            let cfg = LabelConfig::default();
            // Compare away from the threshold boundaries, where rounding of
            // the scaled coordinates could flip a comparison.
            let ious = anchor_ious(&grid, &gt);
            let near = |v: f64| [cfg.iou_pos_thresh, cfg.iou_neg_thresh].iter().any(|t| (v - t).abs() < 1e-9);
            prop_assume!(!ious.iter().any(|&v| near(v)));
            let mut sorted = ious.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(
                assign_bernoulli_iou(&grid, &gt, &cfg),
                assign_bernoulli_iou(&scaled, &gt.scale(s), &cfg)
            );
        }

        #[test]
        fn gaussian_in_unit_interval_and_monotone(cy in 0.0..9.0f64, cx in 0.0..9.0f64, sigma in 0.3..5.0f64) {
            let g = gaussian_label(10, 10, (cy, cx), sigma).unwrap();
            let mut pairs: Vec<(f64, f64)> = (0..100).map(|k| {
                let (i, j) = (k / 10, k % 10);
                ((i as f64 - cy).hypot(j as f64 - cx), g.0.values[k])
            }).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[1].1 <= w[0].1 + 1e-15);
            }
            prop_assert!(g.0.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
