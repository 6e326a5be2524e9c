//! Boxes, anchor grids, IoU arithmetic and anchor-offset encoding.
//!
//! Boxes use the center parameterization `(cx, cy, w, h)` in continuous pixel
//! coordinates. File formats use the top-left `(x, y, w, h)` form; convert with
//! [`BBox::from_xywh`] and [`BBox::to_xywh`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle, center parameterization.
///
/// Fields are public for ergonomic arithmetic; [`BBox::new`] is the checked
/// constructor and everything in this crate that produces boxes keeps
/// `w > 0`, `h > 0` and finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("({cx}, {cy}, {w}, {h})")))
        }
    }

    /// Builds a box from a top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            cx: self.cx * factor,
            cy: self.cy * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }
}

/// Intersection over union. Touching boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from corners so that identical boxes give exactly 1.
    let area_a = (a.x1() - a.x0()) * (a.y1() - a.y0());
    let area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Pairwise IoU, `as.len()` rows by `bs.len()` columns.
pub fn iou_matrix(a_boxes: &[BBox], b_boxes: &[BBox]) -> Vec<Vec<f64>> {
    a_boxes
        .iter()
        .map(|a| b_boxes.iter().map(|b| iou(a, b)).collect())
        .collect()
}

/// Width and height of one anchor preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub w: f64,
    pub h: f64,
}

const RATIOS_1: [f64; 1] = [1.0];
const RATIOS_3: [f64; 3] = [0.5, 1.0, 2.0];
const RATIOS_5: [f64; 5] = [1.0 / 3.0, 0.5, 1.0, 2.0, 3.0];

fn ratio_table(count: usize) -> Result<&'static [f64]> {
    match count {
        1 => Ok(&RATIOS_1),
        3 => Ok(&RATIOS_3),
        5 => Ok(&RATIOS_5),
        _ => Err(Error::InvalidArgument(format!(
            "no anchor preset for {count} scales (supported: 1, 3, 5)"
        ))),
    }
}

impl AnchorShape {
    /// Standard RPN presets: one base size with aspect ratios (h/w)
    /// `{1/3, 1/2, 1, 2, 3}` for five scales, `{1}` for one.
    pub fn presets(count: usize, base: f64) -> Result<Vec<AnchorShape>> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::InvalidArgument(format!("anchor base {base}")));
        }
        let area = base * base;
        Ok(ratio_table(count)?
            .iter()
            .map(|&r| {
                let w = (area / r).sqrt();
                AnchorShape { w, h: w * r }
            })
            .collect())
    }

    /// Presets relative to a reference box: same area, aspect ratio of the
    /// reference multiplied by each preset ratio. The ratio-1 preset equals the
    /// reference shape.
    pub fn presets_around(count: usize, reference: &BBox) -> Result<Vec<AnchorShape>> {
        let area = reference.area();
        let aspect = reference.h / reference.w;
        Ok(ratio_table(count)?
            .iter()
            .map(|&r| {
                let q = aspect * r;
                let w = (area / q).sqrt();
                AnchorShape { w, h: w * q }
            })
            .collect())
    }
}

/// Dense anchors over an `height x width` score grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub shapes: Vec<AnchorShape>,
    /// Pixel position `(x, y)` of cell `(0, 0)`.
    pub origin_offset: (f64, f64),
}

pub fn make_anchor_grid(
    height: usize,
    width: usize,
    stride: f64,
    shapes: Vec<AnchorShape>,
) -> Result<AnchorGrid> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("anchor grid must be non-empty".into()));
    }
    if !(stride > 0.0 && stride.is_finite()) {
        return Err(Error::InvalidArgument(format!("stride {stride} must be positive")));
    }
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("at least one anchor scale required".into()));
    }
    if shapes.iter().any(|s| !(s.w > 0.0 && s.h > 0.0 && s.w.is_finite() && s.h.is_finite())) {
        return Err(Error::InvalidArgument("anchor shapes must be positive".into()));
    }
    Ok(AnchorGrid {
        height,
        width,
        stride,
        shapes,
        origin_offset: (0.0, 0.0),
    })
}

impl AnchorGrid {
    pub fn with_origin(mut self, x: f64, y: f64) -> Self {
        self.origin_offset = (x, y);
        self
    }

    pub fn num_anchors(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index with the anchor dimension fastest.
    pub fn index(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.width + j) * self.shapes.len() + a
    }

    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let a_count = self.shapes.len();
        let a = idx % a_count;
        let cell = idx / a_count;
        (cell / self.width, cell % self.width, a)
    }

    /// Pixel center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_offset.0 + self.stride * j as f64,
            self.origin_offset.1 + self.stride * i as f64,
        )
    }

    /// Continuous grid coordinates `(row, col)` of a pixel position.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin_offset.1) / self.stride,
            (x - self.origin_offset.0) / self.stride,
        )
    }

    pub fn anchor(&self, i: usize, j: usize, a: usize) -> BBox {
        let (cx, cy) = self.cell_center(i, j);
        let s = self.shapes[a];
        BBox { cx, cy, w: s.w, h: s.h }
    }

    /// All anchors in row-major, anchor-fastest order.
    pub fn anchors(&self) -> Vec<BBox> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.height {
            for j in 0..self.width {
                for a in 0..self.shapes.len() {
                    out.push(self.anchor(i, j, a));
                }
            }
        }
        out
    }
}

/// Offsets `(dcx, dcy, dw, dh)` that map `anchor` onto `target`.
pub fn encode_offsets(anchor: &BBox, target: &BBox) -> [f64; 4] {
    [
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ]
}

/// Linear center shift scaled by anchor size, exponential size scaling.
pub fn decode_offsets(anchor: &BBox, offsets: &[f64; 4]) -> BBox {
    BBox {
        cx: anchor.cx + offsets[0] * anchor.w,
        cy: anchor.cy + offsets[1] * anchor.h,
        w: anchor.w * offsets[2].exp(),
        h: anchor.h * offsets[3].exp(),
    }
}

/// Dense per-anchor box predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBoxes {
    pub grid: AnchorGrid,
    pub offsets: Vec<[f64; 4]>,
}

impl DenseBoxes {
    pub fn new(grid: AnchorGrid, offsets: Vec<[f64; 4]>) -> Result<Self> {
        if offsets.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for a grid of {} anchors",
                offsets.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, offsets })
    }

    pub fn zeros(grid: AnchorGrid) -> Self {
        let n = grid.len();
        Self { grid, offsets: vec![[0.0; 4]; n] }
    }

    pub fn decode(&self, i: usize, j: usize, a: usize) -> BBox {
        decode_offsets(&self.grid.anchor(i, j, a), &self.offsets[self.grid.index(i, j, a)])
    }

    pub fn decode_linear(&self, idx: usize) -> BBox {
        let (i, j, a) = self.grid.unravel(idx);
        self.decode(i, j, a)
    }

    pub fn decode_all(&self) -> Vec<BBox> {
        (0..self.offsets.len()).map(|k| self.decode_linear(k)).collect()
    }
}
