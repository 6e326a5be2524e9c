//! Dense-grid utilities: heatmaps, feature grids, normalization, peak
//! finding, resizing and windowing.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Score grid `height x width x anchors`, stored row-major with the anchor
/// dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub anchors: usize,
    pub values: Vec<f64>,
}

/// Grid index `(row, col, anchor)`.
pub type Cell = (usize, usize, usize);

impl Heatmap {
    pub fn new(height: usize, width: usize, anchors: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || anchors == 0 {
            return Err(Error::InvalidArgument("heatmap dimensions must be positive".into()));
        }
        if values.len() != height * width * anchors {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{anchors} heatmap",
                values.len()
            )));
        }
        Ok(Self { height, width, anchors, values })
    }

    pub fn zeros(height: usize, width: usize, anchors: usize) -> Self {
        Self { height, width, anchors, values: vec![0.0; height * width * anchors] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        anchors: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * anchors);
        for i in 0..height {
            for j in 0..width {
                for a in 0..anchors {
                    values.push(f(i, j, a));
                }
            }
        }
        Self { height, width, anchors, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.width + j) * self.anchors + a
    }

    pub fn unravel(&self, idx: usize) -> Cell {
        let a = idx % self.anchors;
        let cell = idx / self.anchors;
        (cell / self.width, cell % self.width, a)
    }

    pub fn get(&self, i: usize, j: usize, a: usize) -> f64 {
        self.values[self.index(i, j, a)]
    }

    pub fn set(&mut self, i: usize, j: usize, a: usize, v: f64) {
        let k = self.index(i, j, a);
        self.values[k] = v;
    }

    pub fn same_shape(&self, other: &Heatmap) -> bool {
        self.height == other.height && self.width == other.width && self.anchors == other.anchors
    }

    pub fn same_spatial(&self, other: &Heatmap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Anchor slice `a` as an `A = 1` map.
    pub fn slice(&self, a: usize) -> Heatmap {
        Heatmap::from_fn(self.height, self.width, 1, |i, j, _| self.get(i, j, a))
    }

    /// Maximum over anchors at every cell, as an `A = 1` map.
    pub fn max_over_anchors(&self) -> Heatmap {
        Heatmap::from_fn(self.height, self.width, 1, |i, j, _| {
            (0..self.anchors).map(|a| self.get(i, j, a)).fold(f64::NEG_INFINITY, f64::max)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            anchors: self.anchors,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Text dump: first line `H W A`, then every value, row-major with the
    /// anchor dimension fastest, space separated, 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.anchors);
        for (k, v) in self.values.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.8e}");
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Heatmap> {
        let mut tokens = text.split_whitespace();
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = tokens
                .next()
                .ok_or_else(|| Error::Malformed("missing heatmap header".into()))?
                .parse()
                .map_err(|e| Error::Malformed(format!("heatmap header: {e}")))?;
        }
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::Malformed(format!("heatmap value: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Heatmap::new(dims[0], dims[1], dims[2], values)
    }
}

/// Channel-major feature grid `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(c, i, j);
        self.data[k] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn scaled(&self, s: f64) -> FeatureMap {
        FeatureMap { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Crop `height x width` starting at `(top, left)`, which may lie outside
    /// the grid; out-of-range cells are zero.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for i in 0..height {
                let si = top + i as isize;
                if si < 0 || si >= self.height as isize {
                    continue;
                }
                for j in 0..width {
                    let sj = left + j as isize;
                    if sj < 0 || sj >= self.width as isize {
                        continue;
                    }
                    out.set(c, i, j, self.get(c, si as usize, sj as usize));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> FeatureMap {
        FeatureMap::from_fn(self.channels, self.height, self.width, |c, i, j| {
            self.get(c, i, self.width - 1 - j)
        })
    }

    /// Bilinear sample at continuous `(row, col)`; zero outside the grid.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let mut acc = 0.0;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                let yi = y0 as isize + dy;
                let xi = x0 as isize + dx;
                if yi >= 0 && xi >= 0 && (yi as usize) < self.height && (xi as usize) < self.width {
                    acc += w * self.get(c, yi as usize, xi as usize);
                }
            }
        }
        acc
    }
}

/// Adaptive average pooling: output cell `(i, j)` averages input rows
/// `floor(i H / out_h) .. ceil((i + 1) H / out_h)` and likewise for columns.
pub fn adaptive_avg_pool(grid: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let bins = |n_in: usize, n_out: usize| -> Vec<(usize, usize)> {
        (0..n_out)
            .map(|o| ((o * n_in) / n_out, ((o + 1) * n_in).div_ceil(n_out)))
            .collect()
    };
    let rows = bins(grid.height, out_h);
    let cols = bins(grid.width, out_w);
    FeatureMap::from_fn(grid.channels, out_h, out_w, |c, i, j| {
        let (r0, r1) = rows[i];
        let (c0, c1) = cols[j];
        let mut acc = 0.0;
        for r in r0..r1 {
            for q in c0..c1 {
                acc += grid.get(c, r, q);
            }
        }
        acc / ((r1 - r0) * (c1 - c0)) as f64
    })
}

/// Softmax over every cell with max subtraction.
pub fn softmax_norm(h: &Heatmap) -> Heatmap {
    let m = h.max();
    let exp: Vec<f64> = h.values.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    Heatmap { values: exp.into_iter().map(|e| e / z).collect(), ..h.clone() }
}

/// Divide by the total. Requires non-negative values with a positive sum.
pub fn sum_norm(h: &Heatmap) -> Result<Heatmap> {
    if h.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("sum normalization needs non-negative values".into()));
    }
    let z = h.sum();
    if z <= 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    Ok(h.map(|v| v / z))
}

/// Maximal cell; ties resolve to the smallest row-major linear index.
pub fn argmax_peak(h: &Heatmap) -> (Cell, f64) {
    let mut best = 0usize;
    let mut best_v = h.values[0];
    for (k, &v) in h.values.iter().enumerate().skip(1) {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    (h.unravel(best), best_v)
}

/// Align-corners bilinear resize of every channel.
pub fn bilinear_resize(grid: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    if out_h == grid.height && out_w == grid.width {
        return grid.clone();
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        } else {
            0.0
        }
    };
    let sy = scale(grid.height, out_h);
    let sx = scale(grid.width, out_w);
    // Precompute per-axis source indices and weights.
    let axis = |n_in: usize, n_out: usize, s: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let p = o as f64 * s;
                let lo = (p.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, p - lo as f64)
            })
            .collect()
    };
    let ys = axis(grid.height, out_h, sy);
    let xs = axis(grid.width, out_w, sx);
    let mut out = FeatureMap::zeros(grid.channels, out_h, out_w);
    for c in 0..grid.channels {
        for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = grid.get(c, y0, x0) * (1.0 - fx) + grid.get(c, y0, x1) * fx;
                let bot = grid.get(c, y1, x0) * (1.0 - fx) + grid.get(c, y1, x1) * fx;
                out.set(c, oi, oj, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Hann vector `0.5 - 0.5 cos(2 pi k / (n - 1))`; a single sample is 1.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / (n as f64 - 1.0)).cos())
        .collect()
}

/// Outer product of Hann vectors as an `h x w x 1` heatmap.
pub fn cosine_window(h: usize, w: usize) -> Heatmap {
    let hy = hann(h);
    let hx = hann(w);
    Heatmap::from_fn(h, w, 1, |i, j, _| (hy[i] * hx[j]).clamp(0.0, 1.0))
}

/// Repeats a single-anchor map along the anchor dimension.
pub fn broadcast_anchor(h: &Heatmap, target_anchors: usize) -> Result<Heatmap> {
    if h.anchors != 1 {
        return Err(Error::ShapeMismatch(format!(
            "broadcast needs A = 1, got A = {}",
            h.anchors
        )));
    }
    if target_anchors == 0 {
        return Err(Error::InvalidArgument("target anchor count must be positive".into()));
    }
    Ok(Heatmap::from_fn(h.height, h.width, target_anchors, |i, j, _| h.get(i, j, 0)))
}
