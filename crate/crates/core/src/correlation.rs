//! Cross-correlation scoring and per-layer aggregation.
//!
//! All correlations are valid-mode (no padding) and do not flip the kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmath::{FeatureMap, Heatmap};

/// Feature layers sharing one spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub layers: Vec<FeatureMap>,
    /// Pixels per cell of the common grid.
    pub stride: f64,
}

impl FeaturePyramid {
    pub fn new(layers: Vec<FeatureMap>, stride: f64) -> Result<Self> {
        let p = Self { layers, stride };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("pyramid needs at least one layer".into()))?;
        if self.layers.iter().any(|l| !l.same_shape(first)) {
            return Err(Error::ShapeMismatch("pyramid layers differ in shape".into()));
        }
        if self.layers.iter().any(|l| l.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("pyramid holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.layers[0].channels
    }
    pub fn height(&self) -> usize {
        self.layers[0].height
    }
    pub fn width(&self) -> usize {
        self.layers[0].width
    }

    pub fn map_layers(&self, f: impl Fn(&FeatureMap) -> FeatureMap) -> FeaturePyramid {
        FeaturePyramid { layers: self.layers.iter().map(f).collect(), stride: self.stride }
    }
}

/// Per-layer weights: `alpha` aggregates correlation scores, `beta` fuses
/// features for the online branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for LayerWeights {
    fn default() -> Self {
        Self { alpha: vec![0.5, 0.3, 0.2], beta: vec![0.2, 0.3, 0.5] }
    }
}

impl LayerWeights {
    pub fn validate(&self, layers: usize) -> Result<()> {
        for (name, w) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if w.len() != layers {
                return Err(Error::ShapeMismatch(format!("{name} has {} weights for {layers} layers", w.len())));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} holds non-finite weights")));
            }
        }
        Ok(())
    }
}

fn check_kernel(feature: &FeatureMap, kernel: &FeatureMap) -> Result<()> {
    if kernel.channels != feature.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} channels, feature {}",
            kernel.channels, feature.channels
        )));
    }
    if kernel.height > feature.height {
        return Err(Error::KernelExceedsFeature { kernel: kernel.height, feature: feature.height });
    }
    if kernel.width > feature.width {
        return Err(Error::KernelExceedsFeature { kernel: kernel.width, feature: feature.width });
    }
    Ok(())
}

/// Per-channel correlation: output channel `c` is `feature[c] ⋆ kernel[c]`.
pub fn depthwise_xcorr(feature: &FeatureMap, kernel: &FeatureMap) -> Result<FeatureMap> {
    check_kernel(feature, kernel)?;
    let oh = feature.height - kernel.height + 1;
    let ow = feature.width - kernel.width + 1;
    let mut out = FeatureMap::zeros(feature.channels, oh, ow);
    for c in 0..feature.channels {
        let f = feature.channel(c);
        let k = kernel.channel(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        correlate_into(f, feature.width, k, kernel.height, kernel.width, dst, oh, ow);
    }
    Ok(out)
}

/// Channel sum of the depthwise correlation, as an `A = 1` heatmap.
pub fn upchannel_xcorr(feature: &FeatureMap, kernel: &FeatureMap) -> Result<Heatmap> {
    check_kernel(feature, kernel)?;
    let oh = feature.height - kernel.height + 1;
    let ow = feature.width - kernel.width + 1;
    let mut out = vec![0.0; oh * ow];
    for c in 0..feature.channels {
        correlate_into(
            feature.channel(c),
            feature.width,
            kernel.channel(c),
            kernel.height,
            kernel.width,
            &mut out,
            oh,
            ow,
        );
    }
    Ok(Heatmap { height: oh, width: ow, anchors: 1, values: out })
}

/// Adjoint of [`upchannel_xcorr`] in the kernel argument: the gradient of
/// `<upchannel_xcorr(feature, k), upstream>` with respect to `k`.
pub fn upchannel_xcorr_adjoint(
    feature: &FeatureMap,
    upstream: &[f64],
    kernel_h: usize,
    kernel_w: usize,
) -> Result<FeatureMap> {
    if kernel_h > feature.height || kernel_w > feature.width {
        return Err(Error::KernelExceedsFeature { kernel: kernel_h.max(kernel_w), feature: feature.height.min(feature.width) });
    }
    let oh = feature.height - kernel_h + 1;
    let ow = feature.width - kernel_w + 1;
    if upstream.len() != oh * ow {
        return Err(Error::ShapeMismatch(format!("upstream has {} values, expected {}", upstream.len(), oh * ow)));
    }
    let mut out = FeatureMap::zeros(feature.channels, kernel_h, kernel_w);
    for c in 0..feature.channels {
        let f = feature.channel(c);
        for ki in 0..kernel_h {
            for kj in 0..kernel_w {
                let mut acc = 0.0;
                for i in 0..oh {
                    let row = &f[(i + ki) * feature.width + kj..(i + ki) * feature.width + kj + ow];
                    let up = &upstream[i * ow..(i + 1) * ow];
                    acc += row.iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
                }
                out.set(c, ki, kj, acc);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn correlate_into(
    f: &[f64],
    fw: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    dst: &mut [f64],
    oh: usize,
    ow: usize,
) {
    for ki in 0..kh {
        for kj in 0..kw {
            let w = k[ki * kw + kj];
            if w == 0.0 {
                continue;
            }
            for i in 0..oh {
                let src = &f[(i + ki) * fw + kj..(i + ki) * fw + kj + ow];
                let out = &mut dst[i * ow..(i + 1) * ow];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
}

/// `sum_l alpha[l] * scores[l]`.
pub fn aggregate_layers(per_layer_scores: &[Heatmap], alpha: &[f64]) -> Result<Heatmap> {
    let first = per_layer_scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no layer scores".into()))?;
    if per_layer_scores.len() != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers, {} weights",
            per_layer_scores.len(),
            alpha.len()
        )));
    }
    if per_layer_scores.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::ShapeMismatch("layer scores differ in shape".into()));
    }
    let mut out = Heatmap::zeros(first.height, first.width, first.anchors);
    for (s, &w) in per_layer_scores.iter().zip(alpha) {
        for (o, v) in out.values.iter_mut().zip(&s.values) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `sum_l beta[l] * layer[l]`, element-wise.
pub fn fuse_features(pyr: &FeaturePyramid, beta: &[f64]) -> Result<FeatureMap> {
    pyr.validate()?;
    if pyr.layers.len() != beta.len() {
        return Err(Error::ShapeMismatch(format!("{} layers, {} weights", pyr.layers.len(), beta.len())));
    }
    let first = &pyr.layers[0];
    let mut out = FeatureMap::zeros(first.channels, first.height, first.width);
    for (l, &w) in pyr.layers.iter().zip(beta) {
        for (o, v) in out.data.iter_mut().zip(&l.data) {
            *o += w * v;
        }
    }
    Ok(out)
}
