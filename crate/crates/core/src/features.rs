//! Feature providers standing in for a CNN backbone: an oracle provider
//! painting identity blobs from simulator scenes, and a gradient-orientation
//! provider for grayscale frames.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::gridmath::{adaptive_avg_pool, bilinear_resize, FeatureMap};
use crate::online::FILTER_SIZE;
use crate::sim::SceneState;

pub const ORIENTATION_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Oracle,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub channels: usize,
    pub stride: usize,
    pub layer_count: usize,
    pub noise_sigma: f64,
    pub identity_dim: usize,
    /// Squared weight of the shared class direction in every object's
    /// feature vector; the template response of an equal-strength
    /// distractor relative to the target.
    pub class_similarity: f64,
    /// Blob std as a fraction of the object side.
    pub blob_scale: f64,
    /// Relative blob widening per layer.
    pub layer_blur: f64,
    /// Multiplier per layer, applied after noise; 0 blanks the layer.
    pub layer_gains: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Oracle,
            channels: 16,
            stride: 8,
            layer_count: 3,
            noise_sigma: 0.05,
            identity_dim: 8,
            class_similarity: 0.6,
            blob_scale: 0.3,
            layer_blur: 0.5,
            layer_gains: vec![1.0, 1.0, 1.0],
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.layer_count == 0 {
            return Err(Error::InvalidArgument("stride and layer_count must be positive".into()));
        }
        if self.mode == FeatureMode::Oracle && !(self.channels >= self.identity_dim && self.identity_dim >= 1) {
            return Err(Error::InvalidArgument("need channels >= identity_dim >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.class_similarity) {
            return Err(Error::InvalidArgument("bad noise_sigma or class_similarity".into()));
        }
        if !(self.blob_scale > 0.0 && self.layer_blur >= 0.0) {
            return Err(Error::InvalidArgument("bad blob_scale or layer_blur".into()));
        }
        if self.layer_gains.len() != self.layer_count || self.layer_gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("layer_gains must hold one finite gain per layer".into()));
        }
        Ok(())
    }

    /// Channel count of emitted pyramids.
    pub fn output_channels(&self) -> usize {
        match self.mode {
            FeatureMode::Oracle => self.channels,
            FeatureMode::Image => ORIENTATION_BINS,
        }
    }

    pub fn grid_size(&self, frame_width: usize, frame_height: usize) -> (usize, usize) {
        (frame_height / self.stride, frame_width / self.stride)
    }
}

/// Full feature vector of an object: identity part then class part.
pub fn object_vector(identity: &[f64], amplitude: f64, cfg: &FeatureConfig) -> Vec<f64> {
    let id_dim = cfg.identity_dim;
    let class_dim = cfg.channels - id_dim;
    let (a, b) = if class_dim == 0 { (1.0, 0.0) } else { ((1.0 - cfg.class_similarity).sqrt(), cfg.class_similarity.sqrt()) };
    let mut v = vec![0.0; cfg.channels];
    for (k, x) in identity.iter().take(id_dim).enumerate() {
        v[k] = amplitude * a * x;
    }
    let s = 1.0 / (class_dim.max(1) as f64).sqrt();
    for x in v.iter_mut().skip(id_dim) {
        *x = amplitude * b * s;
    }
    v
}

fn mix_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Oracle pyramid for a scene. Layer `l` is painted on a grid coarser by
/// `2^l`, with blobs widened by `1 + layer_blur * l` and scaled by the layer
/// gain, then noised and upsampled to the stride grid. An occluded target
/// paints nothing.
pub fn synth_features(scene: &SceneState, cfg: &FeatureConfig, seed: u64) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid_size(scene.width, scene.height);
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument("frame smaller than one cell".into()));
    }
    let stride = cfg.stride as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, scene.frame));
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let blobs: Vec<(Vec<f64>, BBox)> =
        scene.visible().map(|o| (object_vector(&o.identity, o.amplitude, cfg), o.bbox)).collect();

    let mut layers = Vec::with_capacity(cfg.layer_count);
    for l in 0..cfg.layer_count {
        let f = 1usize << l;
        let lh = gh.div_ceil(f).max(2).min(gh.max(2));
        let lw = gw.div_ceil(f).max(2).min(gw.max(2));
        // Low-res cell k sits at high-res coordinate k * (g - 1) / (n - 1).
        let sy = if gh > 1 { (lh - 1) as f64 / (gh - 1) as f64 } else { 1.0 };
        let sx = if gw > 1 { (lw - 1) as f64 / (gw - 1) as f64 } else { 1.0 };
        let widen = 1.0 + cfg.layer_blur * l as f64;
        let gain = cfg.layer_gains[l];
        let mut map = FeatureMap::zeros(cfg.channels, lh, lw);
        for (v, b) in &blobs {
            let cy = (b.cy / stride - 0.5) * sy;
            let cx = (b.cx / stride - 0.5) * sx;
            let sig_y = (cfg.blob_scale * b.h / stride * widen * sy).max(1e-6);
            let sig_x = (cfg.blob_scale * b.w / stride * widen * sx).max(1e-6);
            let gy: Vec<f64> = (0..lh).map(|i| (-0.5 * ((i as f64 - cy) / sig_y).powi(2)).exp()).collect();
            let gx: Vec<f64> = (0..lw).map(|j| (-0.5 * ((j as f64 - cx) / sig_x).powi(2)).exp()).collect();
            for (c, &vc) in v.iter().enumerate() {
                if vc == 0.0 {
                    continue;
                }
                for i in 0..lh {
                    for j in 0..lw {
                        let k = map.index(c, i, j);
                        map.data[k] += vc * gy[i] * gx[j];
                    }
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            for x in map.data.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        map.data.iter_mut().for_each(|x| *x *= gain);
        let mut up = if (lh, lw) == (gh, gw) { map } else { bilinear_resize(&map, gh, gw) };
        if gh == 1 || gw == 1 {
            up = bilinear_resize(&up, gh, gw);
        }
        layers.push(up);
    }
    FeaturePyramid::new(layers, stride)
}

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Malformed("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Malformed(format!("unsupported PGM magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Malformed(format!("PGM header: {e}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Malformed(format!("unsupported PGM maxval {maxval}")));
        }
        pos += 1;
        let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Malformed("truncated PGM data".into()))?;
        GrayImage::new(w, h, data.to_vec())
    }

    pub fn rotate90(&self) -> GrayImage {
        // Counter-clockwise: (x, y) -> (y, W - 1 - x).
        let (w, h) = (self.width, self.height);
        let mut px = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (y, w - 1 - x);
                px[ny * h + nx] = self.get(x, y);
            }
        }
        GrayImage { width: h, height: w, pixels: px }
    }
}

fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + clampi(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Orientation bin of a gradient: nearest of 8 signed directions, 45° apart,
/// bin 0 pointing along +x.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let a = gy.atan2(gx);
    let k = (a / (PI / 4.0)).round() as isize;
    k.rem_euclid(ORIENTATION_BINS as isize) as usize
}

/// Gradient-orientation histograms pooled over `stride x stride` cells, one
/// layer per pre-blur sigma `0, 1, 2, ...`. Values are magnitude sums per
/// cell divided by `255 * stride^2`.
pub fn image_features(frame: &GrayImage, cfg: &FeatureConfig) -> Result<FeaturePyramid> {
    if cfg.stride == 0 || cfg.layer_count == 0 {
        return Err(Error::InvalidArgument("stride and layer_count must be positive".into()));
    }
    let (gh, gw) = cfg.grid_size(frame.width, frame.height);
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame {}x{} smaller than one {}-pixel cell",
            frame.width, frame.height, cfg.stride
        )));
    }
    let (w, h) = (frame.width, frame.height);
    let base: Vec<f64> = frame.pixels.iter().map(|&p| p as f64).collect();
    let norm = 255.0 * (cfg.stride * cfg.stride) as f64;
    let mut layers = Vec::with_capacity(cfg.layer_count);
    for l in 0..cfg.layer_count {
        let img = gaussian_blur(&base, w, h, l as f64);
        let at = |x: usize, y: usize| img[y * w + x];
        let mut map = FeatureMap::zeros(ORIENTATION_BINS, gh, gw);
        for y in 0..gh * cfg.stride {
            for x in 0..gw * cfg.stride {
                let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
                let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let k = map.index(orientation_bin(gx, gy), y / cfg.stride, x / cfg.stride);
                map.data[k] += mag / norm;
            }
        }
        let gain = cfg.layer_gains.get(l).copied().unwrap_or(1.0);
        layers.push(if gain == 1.0 { map } else { map.scaled(gain) });
    }
    FeaturePyramid::new(layers, cfg.stride as f64)
}

/// Dispatch on mode: oracle needs the scene, image needs the frame.
pub fn extract(cfg: &FeatureConfig, scene: Option<&SceneState>, frame: Option<&GrayImage>, seed: u64) -> Result<FeaturePyramid> {
    match (cfg.mode, scene, frame) {
        (FeatureMode::Oracle, Some(s), _) => synth_features(s, cfg, seed),
        (FeatureMode::Image, _, Some(f)) => image_features(f, cfg),
        _ => Err(Error::InvalidArgument("feature input missing for the configured mode".into())),
    }
}

fn cell_range(lo: f64, hi: f64, stride: f64, n: usize) -> (usize, usize) {
    let a = (lo / stride).floor().max(0.0) as usize;
    let b = ((hi / stride).ceil().max(0.0) as usize).min(n);
    (a.min(n), b)
}

/// The cells of one layer a box covers.
pub fn template_region(layer: &FeatureMap, bbox: &BBox, stride: f64) -> Result<FeatureMap> {
    let (r0, r1) = cell_range(bbox.y0(), bbox.y1(), stride, layer.height);
    let (c0, c1) = cell_range(bbox.x0(), bbox.x1(), stride, layer.width);
    if r1 <= r0 || c1 <= c0 {
        return Err(Error::OutsideExtent);
    }
    Ok(layer.crop(r0 as isize, c0 as isize, r1 - r0, c1 - c0))
}

/// Crop the cells a box covers in one layer and pool them to the filter size.
pub fn extract_template_layer(layer: &FeatureMap, bbox: &BBox, stride: f64) -> Result<FeatureMap> {
    Ok(adaptive_avg_pool(&template_region(layer, bbox, stride)?, FILTER_SIZE, FILTER_SIZE))
}

/// Per-layer `C x 5 x 5` template kernels for a box in pixel coordinates.
pub fn extract_template(pyr: &FeaturePyramid, bbox: &BBox) -> Result<Vec<FeatureMap>> {
    pyr.layers.iter().map(|l| extract_template_layer(l, bbox, pyr.stride)).collect()
}
