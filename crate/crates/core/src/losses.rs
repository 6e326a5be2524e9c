//! Training-signal functions with analytic gradients.
//!
//! Every loss returns its scalar value together with the gradient with
//! respect to the prediction, laid out like the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmath::Heatmap;
use crate::labels::{LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing exponent of the continuous focal losses; even, at least 2.
    pub alpha: u32,
    /// Label-distance exponent of the continuous focal losses.
    pub beta: f64,
    /// Focusing exponent of the binary focal loss.
    pub gamma: f64,
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_o: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            beta: 4.0,
            gamma: 2.0,
            lambda_r: 1.0,
            lambda_a: 10.0,
            lambda_b: 1.2,
            lambda_o: 1.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 2 || self.alpha % 2 != 0 {
            return Err(Error::InvalidArgument(format!("alpha {} must be even and >= 2", self.alpha)));
        }
        if !(self.beta > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("beta must be positive, gamma non-negative".into()));
        }
        let lambdas = [self.lambda_r, self.lambda_a, self.lambda_b, self.lambda_o];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_prob(p: &[f64]) -> Result<()> {
    match p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(&v) => Err(Error::ProbabilityDomain(v)),
        None => Ok(()),
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn check_even(alpha: u32) -> Result<()> {
    if alpha < 2 || alpha % 2 != 0 {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be even and >= 2")));
    }
    Ok(())
}

/// Binary focal loss with split normalization: positives and negatives are
/// each averaged over their own count, then summed. Ignored cells (`-1`)
/// contribute neither loss nor count.
pub fn focal_loss(p: &Heatmap, y: &LabelMap, gamma: f64) -> Result<LossGrad> {
    check_len(p.len(), y.0.len(), "focal loss")?;
    check_prob(&p.values)?;
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for &t in &y.0.values {
        if t == 1.0 {
            n_pos += 1;
        } else if t == 0.0 {
            n_neg += 1;
        } else if t != IGNORE {
            return Err(Error::InvalidArgument(format!("focal loss label {t} not in {{-1, 0, 1}}")));
        }
    }
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (k, (&pk, &t)) in p.values.iter().zip(&y.0.values).enumerate() {
        if t == 1.0 {
            let q = 1.0 - pk;
            pos_sum += q.powf(gamma) * -pk.ln();
            let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pk.ln() };
            grad[k] = (dq - q.powf(gamma) / pk) / n_pos as f64;
        } else if t == 0.0 {
            let q = 1.0 - pk;
            neg_sum += pk.powf(gamma) * -q.ln();
            let dp = if gamma == 0.0 { 0.0 } else { gamma * pk.powf(gamma - 1.0) * -q.ln() };
            grad[k] = (dp + pk.powf(gamma) / q) / n_neg as f64;
        }
    }
    let mut loss = 0.0;
    if n_pos > 0 {
        loss += pos_sum / n_pos as f64;
    }
    if n_neg > 0 {
        loss += neg_sum / n_neg as f64;
    }
    Ok(LossGrad { loss, grad })
}

/// Penalty-reduced focal loss for Gaussian targets, averaged over all cells.
pub fn fc_pr_loss(p: &Heatmap, y: &LabelMap, alpha: u32, beta: f64) -> Result<LossGrad> {
    check_len(p.len(), y.0.len(), "FC_PR")?;
    check_prob(&p.values)?;
    if y.0.values.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::InvalidArgument("FC_PR labels must lie in [0, 1]".into()));
    }
    let n = p.len() as f64;
    let a = alpha as i32;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (k, (&pk, &t)) in p.values.iter().zip(&y.0.values).enumerate() {
        if t == 1.0 {
            let q = 1.0 - pk;
            loss += q.powi(a) * -pk.ln();
            grad[k] = (a as f64 * q.powi(a - 1) * pk.ln() - q.powi(a) / pk) / n;
        } else {
            let q = 1.0 - pk;
            let w = (1.0 - t).powf(beta);
            loss += w * pk.powi(a) * -q.ln();
            grad[k] = w * (a as f64 * pk.powi(a - 1) * -q.ln() + pk.powi(a) / q) / n;
        }
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Regressive focal loss `mean(Y^beta (Y - P)^alpha (-ln P))`; zero exactly
/// where `P = Y`.
pub fn fc_rg_loss(p: &Heatmap, y: &LabelMap, alpha: u32, beta: f64) -> Result<LossGrad> {
    check_len(p.len(), y.0.len(), "FC_RG")?;
    check_prob(&p.values)?;
    check_even(alpha)?;
    if y.0.values.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::InvalidArgument("FC_RG labels must lie in [0, 1]".into()));
    }
    let n = p.len() as f64;
    let a = alpha as i32;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (k, (&pk, &t)) in p.values.iter().zip(&y.0.values).enumerate() {
        let w = t.powf(beta);
        let d = t - pk;
        loss += w * d.powi(a) * -pk.ln();
        grad[k] = w * (a as f64 * d.powi(a - 1) * pk.ln() - d.powi(a) / pk) / n;
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Per-cell parameters of the discriminative residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    /// Spatial weight, non-negative.
    pub v: Vec<f64>,
    /// Target mask in `[0, 1]`; 1 is plain regression, 0 is hinge.
    pub m: Vec<f64>,
    /// Regression target.
    pub y: Vec<f64>,
}

impl ResidualParams {
    pub fn new(v: Vec<f64>, m: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if v.len() != m.len() || v.len() != y.len() {
            return Err(Error::ShapeMismatch("residual parameter lengths differ".into()));
        }
        if v.iter().any(|&x| x < 0.0) || m.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument("need v >= 0 and m in [0, 1]".into()));
        }
        Ok(Self { v, m, y })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Residual `v (m p + (1 - m) max(0, p) - y)` and the diagonal of its
/// Jacobian with respect to `p`. The hinge derivative at `p = 0` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub r: Vec<f64>,
    pub jac_diag: Vec<f64>,
}

impl Residual {
    /// `0.5 * |r|^2`.
    pub fn loss(&self) -> f64 {
        0.5 * self.r.iter().map(|x| x * x).sum::<f64>()
    }
}

pub fn disc_residual(p: &[f64], params: &ResidualParams) -> Result<Residual> {
    check_len(p.len(), params.len(), "residual")?;
    let mut r = Vec::with_capacity(p.len());
    let mut jac_diag = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let (v, m, y) = (params.v[k], params.m[k], params.y[k]);
        let pk = p[k];
        r.push(v * (m * pk + (1.0 - m) * pk.max(0.0) - y));
        let active = if pk > 0.0 { 1.0 } else { 0.0 };
        jac_diag.push(v * (m + (1.0 - m) * active));
    }
    Ok(Residual { r, jac_diag })
}

/// Squared error inside the target region, squared positive part outside;
/// averaged over all cells.
pub fn hinge_l2_loss(p: &Heatmap, y: &LabelMap, target_region: &[bool]) -> Result<LossGrad> {
    check_len(p.len(), y.0.len(), "hinge L2")?;
    check_len(p.len(), target_region.len(), "hinge L2 region")?;
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for k in 0..p.len() {
        let e = if target_region[k] { p.values[k] - y.0.values[k] } else { p.values[k].max(0.0) };
        loss += e * e;
        grad[k] = 2.0 * e / n;
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Mean absolute error over the offsets of positive cells.
pub fn l1_loss(pred: &[[f64; 4]], target: &[[f64; 4]], positive: &[bool]) -> Result<(f64, Vec<[f64; 4]>)> {
    check_len(pred.len(), target.len(), "L1")?;
    check_len(pred.len(), positive.len(), "L1 mask")?;
    let n = positive.iter().filter(|&&b| b).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let denom = 4.0 * n as f64;
    let mut loss = 0.0;
    for k in 0..pred.len() {
        if !positive[k] {
            continue;
        }
        for c in 0..4 {
            let d = pred[k][c] - target[k][c];
            loss += d.abs();
            grad[k][c] = if d > 0.0 {
                1.0 / denom
            } else if d < 0.0 {
                -1.0 / denom
            } else {
                0.0
            };
        }
    }
    Ok((loss / denom, grad))
}

/// Targets for binary cross-entropy are clamped to this margin from 0 and 1.
pub const BCE_TARGET_EPS: f64 = 1e-6;

/// Mean binary cross-entropy.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    check_len(pred.len(), target.len(), "BCE")?;
    check_prob(pred)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for k in 0..pred.len() {
        let p = pred[k];
        let t = target[k].clamp(BCE_TARGET_EPS, 1.0 - BCE_TARGET_EPS);
        loss += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        grad[k] = (p - t) / (p * (1.0 - p)) / n;
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Inputs of the combined training objective.
#[derive(Debug, Clone)]
pub struct TotalLossInputs<'a> {
    /// Robust (online regression) scores and Gaussian labels.
    pub s_r: &'a Heatmap,
    pub y_r: &'a LabelMap,
    /// Cells treated as foreground by the hinge loss.
    pub target_region: &'a [bool],
    /// Accurate (offline classification) probabilities and Bernoulli labels.
    pub s_a: &'a Heatmap,
    pub y_a: &'a LabelMap,
    /// Box offsets per anchor cell of `s_a`; supervised where `y_a == 1`.
    pub box_pred: &'a [[f64; 4]],
    pub box_gt: &'a [[f64; 4]],
    /// IoU-head probabilities per anchor cell and their true IoU targets.
    pub iou_pred: &'a [f64],
    pub iou_gt: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    /// Unweighted `(L_r, L_a, L_b, L_o)`.
    pub components: [f64; 4],
    pub grad_s_r: Vec<f64>,
    pub grad_s_a: Vec<f64>,
    pub grad_box: Vec<[f64; 4]>,
    pub grad_iou: Vec<f64>,
}

/// Sums the four weighted components from their individual values.
pub fn weighted_total(components: [f64; 4], cfg: &LossConfig) -> f64 {
    cfg.lambda_r * components[0]
        + cfg.lambda_a * components[1]
        + cfg.lambda_b * components[2]
        + cfg.lambda_o * components[3]
}

/// `lambda_r L_r + lambda_a L_a + lambda_b L_b + lambda_o L_o` with hinge L2,
/// focal, positive-cell L1 and BCE components.
pub fn total_loss(inputs: &TotalLossInputs<'_>, cfg: &LossConfig) -> Result<TotalLoss> {
    let r = hinge_l2_loss(inputs.s_r, inputs.y_r, inputs.target_region)?;
    let a = focal_loss(inputs.s_a, inputs.y_a, cfg.gamma)?;
    let positive: Vec<bool> = inputs.y_a.0.values.iter().map(|&t| t == 1.0).collect();
    let (lb, gb) = l1_loss(inputs.box_pred, inputs.box_gt, &positive)?;
    let o = bce_loss(inputs.iou_pred, inputs.iou_gt)?;
    let components = [r.loss, a.loss, lb, o.loss];
    Ok(TotalLoss {
        total: weighted_total(components, cfg),
        components,
        grad_s_r: r.grad.iter().map(|g| g * cfg.lambda_r).collect(),
        grad_s_a: a.grad.iter().map(|g| g * cfg.lambda_a).collect(),
        grad_box: gb
            .iter()
            .map(|g| [g[0] * cfg.lambda_b, g[1] * cfg.lambda_b, g[2] * cfg.lambda_b, g[3] * cfg.lambda_b])
            .collect(),
        grad_iou: o.grad.iter().map(|g| g * cfg.lambda_o).collect(),
    })
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = buf[k];
            buf[k] = orig + h;
            let up = f(&buf);
            buf[k] = orig - h;
            let down = f(&buf);
            buf[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
