//! Online filter learning for the robust branch: support memory, filter
//! initialization, Gauss-Newton steepest descent, update scheduling and
//! distractor detection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::correlation::{upchannel_xcorr, upchannel_xcorr_adjoint};
use crate::error::{Error, Result};
use crate::gridmath::{adaptive_avg_pool, FeatureMap, Heatmap};
use crate::labels::LabelMap;
use crate::losses::{disc_residual, ResidualParams};

/// Spatial size of the online filter.
pub const FILTER_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFilter {
    pub weights: FeatureMap,
}

impl OnlineFilter {
    pub fn is_finite(&self) -> bool {
        self.weights.data.iter().all(|v| v.is_finite())
    }

    pub fn respond(&self, feature: &FeatureMap) -> Result<Heatmap> {
        upchannel_xcorr(feature, &self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineLearnerConfig {
    pub init_iterations: usize,
    pub periodic_lr: f64,
    pub periodic_iters: usize,
    pub periodic_every: usize,
    pub hard_lr: f64,
    pub hard_iters: usize,
    pub distractor_ratio: f64,
    pub lost_ratio: f64,
    pub distractor_radius: f64,
    pub memory: usize,
    pub hard_push_weight: f64,
}

impl Default for OnlineLearnerConfig {
    fn default() -> Self {
        Self {
            init_iterations: 10,
            periodic_lr: 0.1,
            periodic_iters: 2,
            periodic_every: 20,
            hard_lr: 0.2,
            hard_iters: 1,
            distractor_ratio: 0.8,
            lost_ratio: 0.25,
            distractor_radius: 3.0,
            memory: 50,
            hard_push_weight: 0.5,
        }
    }
}

impl OnlineLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.init_iterations, self.periodic_iters, self.periodic_every, self.hard_iters, self.memory];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("online learner counts must be positive".into()));
        }
        if !(self.periodic_lr > 0.0 && self.hard_lr > 0.0) {
            return Err(Error::InvalidArgument("online learning rates must be positive".into()));
        }
        for (name, r) in [("distractor_ratio", self.distractor_ratio), ("lost_ratio", self.lost_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.distractor_radius >= 0.0) || !(0.0..=1.0).contains(&self.hard_push_weight) {
            return Err(Error::InvalidArgument("bad distractor radius or hard push weight".into()));
        }
        Ok(())
    }
}

/// Adaptive-average-pool the template feature down to the filter size.
pub fn init_filter(template_feature: &FeatureMap) -> OnlineFilter {
    OnlineFilter { weights: adaptive_avg_pool(template_feature, FILTER_SIZE, FILTER_SIZE) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub feature: FeatureMap,
    pub label: LabelMap,
    /// Residual parameters, one set per filter trained on this memory.
    pub params: Vec<ResidualParams>,
    pub weight: f64,
    pub initial: bool,
}

/// Bounded sample memory. Initial entries are never evicted; otherwise the
/// oldest entry goes first.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    capacity: usize,
    entries: VecDeque<SupportEntry>,
}

impl SupportSet {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("support capacity must be positive".into()));
        }
        Ok(Self { capacity, entries: VecDeque::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &SupportEntry> {
        self.entries.iter()
    }

    pub fn get(&self, k: usize) -> Option<&SupportEntry> {
        self.entries.get(k)
    }

    pub fn push_initial(
        &mut self,
        feature: FeatureMap,
        label: LabelMap,
        params: Vec<ResidualParams>,
        weight: f64,
    ) -> Result<()> {
        self.insert(SupportEntry { feature, label, params, weight, initial: true })
    }

    pub fn push(&mut self, feature: FeatureMap, label: LabelMap, params: Vec<ResidualParams>, weight: f64) -> Result<()> {
        self.insert(SupportEntry { feature, label, params, weight, initial: false })
    }

    /// Training samples for filter `k`.
    pub fn samples(&self, k: usize) -> Result<Vec<Sample<'_>>> {
        self.entries
            .iter()
            .map(|e| {
                e.params
                    .get(k)
                    .map(|p| Sample { feature: &e.feature, params: p, weight: e.weight })
                    .ok_or_else(|| Error::ShapeMismatch(format!("support entry lacks parameters for filter {k}")))
            })
            .collect()
    }

    fn insert(&mut self, entry: SupportEntry) -> Result<()> {
        if !(entry.weight >= 0.0) {
            return Err(Error::InvalidArgument("sample weight must be non-negative".into()));
        }
        if let Some(first) = self.entries.front() {
            if !first.feature.same_shape(&entry.feature)
                || !first.label.0.same_shape(&entry.label.0)
                || first.params.len() != entry.params.len()
            {
                return Err(Error::ShapeMismatch("support entry dimensions differ".into()));
            }
        }
        if entry.initial && self.entries.iter().filter(|e| e.initial).count() >= self.capacity {
            return Err(Error::InvalidArgument("support set full of initial entries".into()));
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            match self.entries.iter().position(|e| !e.initial) {
                Some(k) => {
                    self.entries.remove(k);
                }
                None => break,
            }
        }
        Ok(())
    }
}

/// Owned form of [`support_push`].
pub fn support_push(
    mut support: SupportSet,
    feature: FeatureMap,
    label: LabelMap,
    params: Vec<ResidualParams>,
    weight: f64,
) -> Result<SupportSet> {
    support.push(feature, label, params, weight)?;
    Ok(support)
}

/// One weighted training sample for the filter objective.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub feature: &'a FeatureMap,
    pub params: &'a ResidualParams,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_before: f64,
    /// Objective after the step with the activation pattern held fixed.
    pub loss_after: f64,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Weighted objective `sum_s w_s * 0.5 |r_s|^2` at `filter`.
pub fn objective(filter: &OnlineFilter, samples: &[Sample<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = filter.respond(s.feature)?;
        total += s.weight * disc_residual(&p.values, s.params)?.loss();
    }
    Ok(total)
}

/// Gradient of [`objective`] with respect to the filter weights.
pub fn objective_gradient(filter: &OnlineFilter, samples: &[Sample<'_>]) -> Result<FeatureMap> {
    Ok(linearize(filter, samples)?.1)
}

struct Linearization {
    jac: Vec<Vec<f64>>,
    res: Vec<Vec<f64>>,
}

fn linearize(filter: &OnlineFilter, samples: &[Sample<'_>]) -> Result<(Linearization, FeatureMap, f64)> {
    let w = &filter.weights;
    let mut grad = FeatureMap::zeros(w.channels, w.height, w.width);
    let mut lin = Linearization { jac: Vec::with_capacity(samples.len()), res: Vec::with_capacity(samples.len()) };
    let mut loss = 0.0;
    for s in samples {
        let p = filter.respond(s.feature)?;
        let r = disc_residual(&p.values, s.params)?;
        loss += s.weight * r.loss();
        let upstream: Vec<f64> = r.r.iter().zip(&r.jac_diag).map(|(a, d)| s.weight * a * d).collect();
        let g = upchannel_xcorr_adjoint(s.feature, &upstream, w.height, w.width)?;
        for (acc, v) in grad.data.iter_mut().zip(&g.data) {
            *acc += v;
        }
        lin.jac.push(r.jac_diag);
        lin.res.push(r.r);
    }
    Ok((lin, grad, loss))
}

/// Steepest-descent Gauss-Newton step on the support objective, scaled by
/// `lr`. The hinge activation pattern is frozen for the step, so the
/// post-step loss reported is that of the frozen quadratic model.
pub fn sgd_step_scaled(filter: &OnlineFilter, samples: &[Sample<'_>], lr: f64) -> Result<(OnlineFilter, StepReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    let (lin, grad, loss_before) = linearize(filter, samples)?;
    let gg = grad.norm_sq();
    let gradient_norm = gg.sqrt();
    let unchanged = |converged| {
        Ok((filter.clone(), StepReport { loss_before, loss_after: loss_before, gradient_norm, converged }))
    };
    if gg == 0.0 {
        return unchanged(true);
    }
    let g_filter = OnlineFilter { weights: grad.clone() };
    let mut jg = Vec::with_capacity(samples.len());
    let mut curvature = 0.0;
    for (s, d) in samples.iter().zip(&lin.jac) {
        let q: Vec<f64> = g_filter.respond(s.feature)?.values.iter().zip(d).map(|(a, b)| a * b).collect();
        curvature += s.weight * q.iter().map(|x| x * x).sum::<f64>();
        jg.push(q);
    }
    if !(curvature > 0.0) {
        return unchanged(true);
    }
    let alpha = lr * gg / curvature;
    if alpha == 0.0 {
        return unchanged(false);
    }
    let mut loss_after = 0.0;
    for ((s, r), q) in samples.iter().zip(&lin.res).zip(&jg) {
        loss_after += s.weight * 0.5 * r.iter().zip(q).map(|(a, b)| (a - alpha * b).powi(2)).sum::<f64>();
    }
    let weights = FeatureMap {
        data: filter.weights.data.iter().zip(&grad.data).map(|(t, g)| t - alpha * g).collect(),
        ..filter.weights.clone()
    };
    Ok((OnlineFilter { weights }, StepReport { loss_before, loss_after, gradient_norm, converged: false }))
}

pub fn sgd_step(filter: &OnlineFilter, samples: &[Sample<'_>]) -> Result<(OnlineFilter, StepReport)> {
    sgd_step_scaled(filter, samples, 1.0)
}

/// `iterations` scaled steps, stopping early once the gradient vanishes.
pub fn optimize(
    filter: &OnlineFilter,
    samples: &[Sample<'_>],
    iterations: usize,
    lr_scale: f64,
) -> Result<(OnlineFilter, Vec<StepReport>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut current = filter.clone();
    let mut reports = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (next, report) = sgd_step_scaled(&current, samples, lr_scale)?;
        current = next;
        reports.push(report);
        if report.converged {
            break;
        }
    }
    Ok((current, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    None,
    Periodic { lr: f64, iterations: usize },
    Hard { lr: f64, iterations: usize },
}

pub fn schedule_update(frame_index: usize, distractor: bool, lost: bool, cfg: &OnlineLearnerConfig) -> UpdateKind {
    if lost {
        UpdateKind::None
    } else if distractor {
        UpdateKind::Hard { lr: cfg.hard_lr, iterations: cfg.hard_iters }
    } else if frame_index > 0 && frame_index % cfg.periodic_every == 0 {
        UpdateKind::Periodic { lr: cfg.periodic_lr, iterations: cfg.periodic_iters }
    } else {
        UpdateKind::None
    }
}

/// True when some local maximum farther than `cfg.distractor_radius` cells
/// from `target_cell` exceeds `cfg.distractor_ratio` times the value at the
/// target. Multi-anchor maps are reduced by their anchor maximum.
pub fn detect_distractor(map: &Heatmap, target_cell: (usize, usize), cfg: &OnlineLearnerConfig) -> bool {
    let m = if map.anchors == 1 { map.clone() } else { map.max_over_anchors() };
    let (ti, tj) = target_cell;
    if ti >= m.height || tj >= m.width {
        return false;
    }
    let threshold = cfg.distractor_ratio * m.get(ti, tj, 0);
    for i in 0..m.height {
        for j in 0..m.width {
            let di = i as f64 - ti as f64;
            let dj = j as f64 - tj as f64;
            if (di * di + dj * dj).sqrt() <= cfg.distractor_radius {
                continue;
            }
            let v = m.get(i, j, 0);
            if v > threshold && is_local_max(&m, i, j) {
                return true;
            }
        }
    }
    false
}

fn is_local_max(m: &Heatmap, i: usize, j: usize) -> bool {
    let v = m.get(i, j, 0);
    for ni in i.saturating_sub(1)..=(i + 1).min(m.height - 1) {
        for nj in j.saturating_sub(1)..=(j + 1).min(m.width - 1) {
            if (ni, nj) != (i, j) && m.get(ni, nj, 0) > v {
                return false;
            }
        }
    }
    true
}

/// Regression-style parameters: target `y`, mask fading linearly from 1 at
/// `center` to 0 at `radius` cells, spatial weight `1 + m`.
pub fn regression_params(label: &Heatmap, center: (f64, f64), radius: f64) -> ResidualParams {
    let r = radius.max(1e-9);
    let mut v = Vec::with_capacity(label.len());
    let mut m = Vec::with_capacity(label.len());
    for i in 0..label.height {
        for j in 0..label.width {
            let d = ((i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2)).sqrt();
            let mk = (1.0 - d / r).clamp(0.0, 1.0);
            m.push(mk);
            v.push(1.0 + mk);
        }
    }
    ResidualParams { v, m, y: label.values.clone() }
}

/// Classification-style parameters from a `{1, 0, -1}` label slice:
/// positives regress to 1, negatives are hinged at 0, ignored cells carry
/// no weight.
pub fn classification_params(label: &Heatmap) -> ResidualParams {
    let mut v = Vec::with_capacity(label.len());
    let mut m = Vec::with_capacity(label.len());
    let mut y = Vec::with_capacity(label.len());
    for &l in &label.values {
        if l < 0.0 {
            v.push(0.0);
            m.push(0.0);
            y.push(0.0);
        } else if l > 0.0 {
            v.push(1.0);
            m.push(1.0);
            y.push(l);
        } else {
            v.push(1.0);
            m.push(0.0);
            y.push(0.0);
        }
    }
    ResidualParams { v, m, y }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn l2_params(rng: &mut ChaCha8Rng, n: usize) -> ResidualParams {
        ResidualParams { v: vec![1.0; n], m: vec![1.0; n], y: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    // Dense least squares via normal equations with Gaussian elimination.
    fn normal_equations(filter_shape: (usize, usize, usize), samples: &[Sample<'_>]) -> (Vec<f64>, f64) {
        let (c, kh, kw) = filter_shape;
        let n = c * kh * kw;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for s in samples {
            let f = s.feature;
            let oh = f.height - kh + 1;
            let ow = f.width - kw + 1;
            let sw = s.weight.sqrt();
            for i in 0..oh {
                for j in 0..ow {
                    let k = i * ow + j;
                    let scale = sw * s.params.v[k];
                    let mut row = vec![0.0; n];
                    for cc in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                row[(cc * kh + a) * kw + b] = scale * f.get(cc, i + a, j + b);
                            }
                        }
                    }
                    rows.push((row, scale * s.params.y[k]));
                }
            }
        }
        let mut ata = vec![vec![0.0; n + 1]; n];
        for (row, t) in &rows {
            for a in 0..n {
                for b in 0..n {
                    ata[a][b] += row[a] * row[b];
                }
                ata[a][n] += row[a] * t;
            }
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = ata[r][col] / ata[col][col];
                    for k in col..=n {
                        ata[r][k] -= f * ata[col][k];
                    }
                }
            }
        }
        let x: Vec<f64> = (0..n).map(|r| ata[r][n] / ata[r][r]).collect();
        let loss = 0.5
            * rows
                .iter()
                .map(|(row, t)| (row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - t).powi(2))
                .sum::<f64>();
        (x, loss)
    }

    #[test]
    fn init_filter_pools() {
        let t = FeatureMap::from_fn(3, 5, 5, |c, i, j| (c * 31 + i * 7 + j) as f64);
        assert_eq!(init_filter(&t).weights, t);
        let k = init_filter(&FeatureMap::from_fn(2, 9, 14, |_, _, _| -2.5));
        assert_eq!((k.weights.height, k.weights.width), (5, 5));
        assert!(k.weights.data.iter().all(|&v| (v + 2.5).abs() < 1e-15));
        let big = FeatureMap::from_fn(1, 10, 10, |_, i, j| ((i * 13 + j * 7) % 11) as f64);
        let k = init_filter(&big);
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += big.get(0, 2 * i + a, 2 * j + b);
                    }
                }
                assert!((k.weights.get(0, i, j) - s / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_step_is_exact() {
        let feature = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
        let params = ResidualParams::new(vec![1.0], vec![1.0], vec![3.0]).unwrap();
        let filter = OnlineFilter { weights: FeatureMap::zeros(1, 1, 1) };
        let s = [Sample { feature: &feature, params: &params, weight: 1.0 }];
        let (next, report) = sgd_step(&filter, &s).unwrap();
        assert!((next.weights.data[0] - 3.0).abs() < 1e-15);
        assert!(!report.converged);
        assert!(report.loss_after.abs() < 1e-15);
        let (again, report) = sgd_step(&next, &s).unwrap();
        assert!(report.converged);
        assert_eq!(again, next);
    }

    #[test]
    fn steps_approach_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats: Vec<FeatureMap> = (0..40).map(|_| random_map(&mut rng, 2, 6, 6)).collect();
        let params: Vec<ResidualParams> = (0..40).map(|_| l2_params(&mut rng, 4)).collect();
        let samples: Vec<Sample> =
            feats.iter().zip(&params).map(|(f, p)| Sample { feature: f, params: p, weight: 1.0 }).collect();
        let (_, optimum) = normal_equations((2, 5, 5), &samples);
        let mut filter = OnlineFilter { weights: FeatureMap::zeros(2, 5, 5) };
        let mut last = f64::INFINITY;
        for k in 0..200 {
            let (next, report) = sgd_step(&filter, &samples).unwrap();
            if k < 5 {
                assert!(report.loss_after < report.loss_before);
                assert!(report.loss_before < last);
            }
            last = report.loss_before;
            filter = next;
        }
        let final_loss = objective(&filter, &samples).unwrap();
        assert!((final_loss - optimum).abs() < 1e-4, "{final_loss} vs {optimum}");
    }

    #[test]
    fn well_conditioned_converges_within_fifty_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<FeatureMap> = (0..100).map(|_| random_map(&mut rng, 2, 8, 8)).collect();
        let params: Vec<ResidualParams> = (0..100).map(|_| l2_params(&mut rng, 16)).collect();
        let samples: Vec<Sample> =
            feats.iter().zip(&params).map(|(f, p)| Sample { feature: f, params: p, weight: 1.0 }).collect();
        let (x, optimum) = normal_equations((2, 5, 5), &samples);
        let start = OnlineFilter { weights: FeatureMap::zeros(2, 5, 5) };
        let (f, reports) = optimize(&start, &samples, 50, 1.0).unwrap();
        assert!(reports.len() <= 50);
        let g = objective_gradient(&f, &samples).unwrap();
        assert!(g.norm_sq().sqrt() < 1e-6);
        for (a, b) in f.weights.data.iter().zip(&x) {
            assert!((a - b).abs() < 1e-4);
        }
        let (f10, _) = optimize(&start, &samples, 10, 1.0).unwrap();
        let l10 = objective(&f10, &samples).unwrap();
        assert!(l10 <= optimum * 1.01, "{l10} vs {optimum}");
    }

    #[test]
    fn optimize_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_map(&mut rng, 2, 7, 7);
        let p = l2_params(&mut rng, 9);
        let s = [Sample { feature: &f, params: &p, weight: 1.0 }];
        let start = OnlineFilter { weights: random_map(&mut rng, 2, 5, 5) };
        assert!(optimize(&start, &s, 0, 1.0).is_err());
        assert_eq!(optimize(&start, &s, 1, 1.0).unwrap().0, sgd_step(&start, &s).unwrap().0);
        assert_eq!(optimize(&start, &s, 3, 0.0).unwrap().0, start);
        assert!(sgd_step(&start, &[]).is_err());
    }

    #[test]
    fn hinge_steps_descend_frozen_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_map(&mut rng, 3, 9, 9);
        let label = Heatmap::from_fn(5, 5, 1, |i, j, _| if (i, j) == (2, 2) { 1.0 } else if i == 0 { -1.0 } else { 0.0 });
        let p = classification_params(&label);
        let s = [Sample { feature: &f, params: &p, weight: 2.0 }];
        let mut filter = OnlineFilter { weights: random_map(&mut rng, 3, 5, 5) };
        for _ in 0..5 {
            let (next, report) = sgd_step(&filter, &s).unwrap();
            assert!(report.loss_after <= report.loss_before + 1e-12);
            assert!(next.is_finite());
            filter = next;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 2, 7, 7);
        let n = 9;
        let p = ResidualParams::new(
            (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let s = [Sample { feature: &f, params: &p, weight: 0.7 }];
        let filter = OnlineFilter { weights: random_map(&mut rng, 2, 5, 5) };
        let g = objective_gradient(&filter, &s).unwrap();
        let num = crate::losses::numeric_gradient(&filter.weights.data, 1e-6, |x| {
            let w = FeatureMap { data: x.to_vec(), ..filter.weights.clone() };
            objective(&OnlineFilter { weights: w }, &s).unwrap()
        });
        for (a, b) in g.data.iter().zip(&num) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    fn entry(tag: f64) -> (FeatureMap, LabelMap) {
        (FeatureMap::from_fn(1, 3, 3, |_, _, _| tag), LabelMap(Heatmap::zeros(2, 2, 1)))
    }

    #[test]
    fn support_eviction_order() {
        let s = SupportSet::new(50).unwrap();
        let (f, l) = entry(0.0);
        let s = support_push(s, f, l, vec![], 1.0).unwrap();
        assert_eq!(s.len(), 1);

        let mut s = SupportSet::new(50).unwrap();
        for k in 0..5 {
            let (f, l) = entry(-(k as f64) - 1.0);
            s.push_initial(f, l, vec![], 1.0).unwrap();
        }
        // Reference ring buffer: drop the first unprotected tag on overflow.
        let mut oracle: Vec<(f64, bool)> = (0..5).map(|k| (-(k as f64) - 1.0, true)).collect();
        for k in 0..46 {
            let (f, l) = entry(k as f64);
            s.push(f, l, vec![], 1.0).unwrap();
            oracle.push((k as f64, false));
            if oracle.len() > 50 {
                let first = oracle.iter().position(|t| !t.1).unwrap();
                oracle.remove(first);
            }
        }
        assert_eq!(s.len(), 50);
        assert_eq!(s.entries().filter(|e| e.initial).count(), 5);
        let tags: Vec<f64> = s.entries().map(|e| e.feature.data[0]).collect();
        let oracle_tags: Vec<f64> = oracle.iter().map(|t| t.0).collect();
        assert_eq!(tags, oracle_tags);
        // 51 pushes in total: the sixth-oldest entry, first unprotected, is gone.
        assert!(s.entries().all(|e| e.feature.data[0] != 0.0));
        assert_eq!(s.get(5).unwrap().feature.data[0], 1.0);
        let (bad, l) = (FeatureMap::zeros(2, 3, 3), LabelMap(Heatmap::zeros(2, 2, 1)));
        assert!(s.push(bad, l, vec![], 1.0).is_err());
    }

    #[test]
    fn samples_follow_entries() {
        let mut s = SupportSet::new(3).unwrap();
        let p = ResidualParams::new(vec![1.0; 4], vec![1.0; 4], vec![0.0; 4]).unwrap();
        for k in 0..4 {
            let (f, l) = entry(k as f64);
            s.push(f, l, vec![p.clone(), p.clone()], 0.5 + k as f64).unwrap();
        }
        let got = s.samples(1).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].weight, 1.5);
        assert!(s.samples(2).is_err());
    }

    #[test]
    fn schedule_table() {
        let cfg = OnlineLearnerConfig::default();
        for frame in 1..=40 {
            for distractor in [false, true] {
                for lost in [false, true] {
                    let got = schedule_update(frame, distractor, lost, &cfg);
                    let want = if lost {
                        UpdateKind::None
                    } else if distractor {
                        UpdateKind::Hard { lr: 0.2, iterations: 1 }
                    } else if frame == 20 || frame == 40 {
                        UpdateKind::Periodic { lr: 0.1, iterations: 2 }
                    } else {
                        UpdateKind::None
                    };
                    assert_eq!(got, want, "frame {frame} d {distractor} l {lost}");
                    assert_eq!(got, schedule_update(frame, distractor, lost, &cfg));
                }
            }
        }
    }

    fn bumps(peaks: &[(f64, f64, f64)]) -> Heatmap {
        Heatmap::from_fn(17, 17, 1, |i, j, _| {
            peaks
                .iter()
                .map(|&(ci, cj, a)| a * (-((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)) / 2.0).exp())
                .sum()
        })
    }

    #[test]
    fn distractor_rule() {
        let cfg = OnlineLearnerConfig::default();
        assert!(!detect_distractor(&bumps(&[(8.0, 8.0, 1.0)]), (8, 8), &cfg));
        assert!(detect_distractor(&bumps(&[(4.0, 4.0, 1.0), (12.0, 13.0, 0.9)]), (4, 4), &cfg));
        assert!(!detect_distractor(&bumps(&[(4.0, 4.0, 1.0), (12.0, 13.0, 0.7)]), (4, 4), &cfg));
        let near = Heatmap::from_fn(17, 17, 1, |i, j, _| match (i, j) {
            (8, 8) => 1.0,
            (10, 10) => 0.95,
            _ => 0.0,
        });
        assert!(!detect_distractor(&near, (8, 8), &cfg));
    }

    #[test]
    fn parametric_residuals() {
        let label = Heatmap::from_fn(5, 5, 1, |i, j, _| if (i, j) == (2, 2) { 1.0 } else { 0.0 });
        let p = regression_params(&label, (2.0, 2.0), 2.0);
        assert_eq!(p.m[12], 1.0);
        assert_eq!(p.v[12], 2.0);
        assert_eq!(p.m[13], 0.5);
        assert_eq!(p.m[0], 0.0);
        assert_eq!(p.v[0], 1.0);
        let c = classification_params(&Heatmap::new(1, 3, 1, vec![1.0, 0.0, -1.0]).unwrap());
        assert_eq!((c.v, c.m, c.y), (vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn frozen_objective_never_increases(seed in any::<u64>(), c in 1usize..3, extra in 0usize..3, n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = 5 + extra;
            let feats: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut rng, c, h, h)).collect();
            let cells = (h - 4) * (h - 4);
            let params: Vec<ResidualParams> = (0..n)
                .map(|_| ResidualParams {
                    v: (0..cells).map(|_| rng.random_range(0.0..2.0)).collect(),
                    m: (0..cells).map(|_| if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.0..1.0) }).collect(),
                    y: (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect();
            let samples: Vec<Sample> = feats
                .iter()
                .zip(&params)
                .map(|(f, p)| Sample { feature: f, params: p, weight: rng.random_range(0.1..1.0) })
                .collect();
            let filter = OnlineFilter { weights: random_map(&mut rng, c, 5, 5) };
            let (next, report) = sgd_step(&filter, &samples).unwrap();
            prop_assert!(report.loss_after <= report.loss_before + 1e-12);
            prop_assert!(next.is_finite());
        }

        #[test]
        fn support_never_overflows(ops in proptest::collection::vec(any::<bool>(), 1..120)) {
            let mut s = SupportSet::new(8).unwrap();
            let mut initial = 0;
            for (k, make_initial) in ops.into_iter().enumerate() {
                let (f, l) = entry(k as f64);
                if make_initial && initial < 4 {
                    s.push_initial(f, l, vec![], 1.0).unwrap();
                    initial += 1;
                } else {
                    s.push(f, l, vec![], 1.0).unwrap();
                }
                prop_assert!(s.len() <= 8);
                prop_assert_eq!(s.entries().filter(|e| e.initial).count(), initial);
            }
        }
    }
}
