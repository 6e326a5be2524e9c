//! Synthetic sequences: a target and distractors moving by damped random
//! walks, with groundtruth, occlusion flags and optional rendering.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::GrayImage;
use crate::geometry::{iou, BBox};

const DAMPING: f64 = 0.9;
const MIN_SIDE: f64 = 12.0;
const IDENTITY_MAX_DOT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub length: usize,
    pub distractors: usize,
    /// Std of the per-frame velocity kick, pixels.
    pub motion_sigma: f64,
    /// Std of the per-frame log-scale step.
    pub scale_walk_sigma: f64,
    /// Chance per visible frame that an occlusion starts.
    pub occlusion_prob: f64,
    pub occlusion_len: usize,
    pub seed: u64,
    pub frame_width: usize,
    pub frame_height: usize,
    pub target_size: f64,
    pub identity_dim: usize,
    /// Std of the per-frame target identity perturbation.
    pub appearance_drift: f64,
    /// Velocity pull of distractors toward the target per pixel of offset.
    pub distractor_pull: f64,
    pub distractor_amplitude: [f64; 2],
    pub background_level: f64,
    pub background_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            length: 120,
            distractors: 2,
            motion_sigma: 1.5,
            scale_walk_sigma: 0.01,
            occlusion_prob: 0.1,
            occlusion_len: 3,
            seed: 0,
            frame_width: 320,
            frame_height: 240,
            target_size: 40.0,
            identity_dim: 8,
            appearance_drift: 0.02,
            distractor_pull: 0.004,
            distractor_amplitude: [0.8, 1.2],
            background_level: 60.0,
            background_noise: 10.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::InvalidArgument("sequence length must be at least 2".into()));
        }
        let sigmas = [self.motion_sigma, self.scale_walk_sigma, self.appearance_drift, self.background_noise];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigmas must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::InvalidArgument("occlusion_prob must lie in [0, 1]".into()));
        }
        if self.identity_dim == 0 {
            return Err(Error::InvalidArgument("identity_dim must be positive".into()));
        }
        let [lo, hi] = self.distractor_amplitude;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument("distractor amplitude range must be positive".into()));
        }
        let fw = self.frame_width as f64;
        let fh = self.frame_height as f64;
        if !(self.target_size >= MIN_SIDE && 2.0 * self.target_size <= fw.min(fh)) {
            return Err(Error::InvalidArgument("target size must fit twice into the frame".into()));
        }
        if !(self.distractor_pull >= 0.0) {
            return Err(Error::InvalidArgument("distractor_pull must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    /// Unit vector of length `identity_dim`.
    pub identity: Vec<f64>,
    pub amplitude: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
    pub occluded: bool,
}

impl SceneState {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_index]
    }

    /// Objects whose appearance is observable this frame.
    pub fn visible(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().enumerate().filter(move |(k, _)| !(self.occluded && *k == self.target_index)).map(|(_, o)| o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub scenes: Vec<SceneState>,
    pub groundtruth: Vec<BBox>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SimConfig, margin: f64) -> BBox {
    let aspect = rng.random_range(-0.2..0.2f64).exp();
    let w = cfg.target_size * aspect;
    let h = cfg.target_size / aspect;
    let fw = cfg.frame_width as f64;
    let fh = cfg.frame_height as f64;
    let cx = rng.random_range(w / 2.0 + margin * (fw - w)..=fw - w / 2.0 - margin * (fw - w));
    let cy = rng.random_range(h / 2.0 + margin * (fh - h)..=fh - h / 2.0 - margin * (fh - h));
    BBox { cx, cy, w, h }
}

fn clamp_into_frame(o: &mut SceneObject, fw: f64, fh: f64) {
    let b = &mut o.bbox;
    b.w = b.w.clamp(MIN_SIDE, 0.6 * fw);
    b.h = b.h.clamp(MIN_SIDE, 0.6 * fh);
    let (lo_x, hi_x) = (b.w / 2.0, fw - b.w / 2.0);
    let (lo_y, hi_y) = (b.h / 2.0, fh - b.h / 2.0);
    if b.cx < lo_x || b.cx > hi_x {
        b.cx = b.cx.clamp(lo_x, hi_x);
        o.velocity[0] = -o.velocity[0];
    }
    if b.cy < lo_y || b.cy > hi_y {
        b.cy = b.cy.clamp(lo_y, hi_y);
        o.velocity[1] = -o.velocity[1];
    }
}

/// Generate a sequence; identical configs give bit-identical output.
pub fn gen_sequence(cfg: &SimConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fw = cfg.frame_width as f64;
    let fh = cfg.frame_height as f64;

    let target_id = unit_vector(&mut rng, cfg.identity_dim);
    let target_box = random_box(&mut rng, cfg, 0.25);
    let mut objects = vec![SceneObject { id: 0, identity: target_id.clone(), amplitude: 1.0, bbox: target_box, velocity: [0.0; 2] }];
    for id in 1..=cfg.distractors {
        let identity = (0..10_000)
            .map(|_| unit_vector(&mut rng, cfg.identity_dim))
            .find(|u| dot(u, &target_id).abs() < IDENTITY_MAX_DOT || cfg.identity_dim == 1)
            .ok_or_else(|| Error::InvalidArgument("cannot draw a distinct distractor identity".into()))?;
        let mut bbox = random_box(&mut rng, cfg, 0.0);
        for _ in 0..1000 {
            if iou(&bbox, &target_box) == 0.0 {
                break;
            }
            bbox = random_box(&mut rng, cfg, 0.0);
        }
        let [lo, hi] = cfg.distractor_amplitude;
        let amplitude = if hi > lo { rng.random_range(lo..hi) } else { lo };
        objects.push(SceneObject { id, identity, amplitude, bbox, velocity: [0.0; 2] });
    }

    let kick = Normal::new(0.0, cfg.motion_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let scale = Normal::new(0.0, cfg.scale_walk_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let drift = Normal::new(0.0, cfg.appearance_drift).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut scenes = Vec::with_capacity(cfg.length);
    let mut occlusion_left = 0usize;
    for frame in 0..cfg.length {
        if frame > 0 {
            let target_center = (objects[0].bbox.cx, objects[0].bbox.cy);
            for (k, o) in objects.iter_mut().enumerate() {
                let mut ax = kick.sample(&mut rng);
                let mut ay = kick.sample(&mut rng);
                if k > 0 {
                    ax += cfg.distractor_pull * (target_center.0 - o.bbox.cx);
                    ay += cfg.distractor_pull * (target_center.1 - o.bbox.cy);
                }
                o.velocity = [DAMPING * o.velocity[0] + ax, DAMPING * o.velocity[1] + ay];
                o.bbox.cx += o.velocity[0];
                o.bbox.cy += o.velocity[1];
                let s = scale.sample(&mut rng).exp();
                o.bbox.w *= s;
                o.bbox.h *= s;
                clamp_into_frame(o, fw, fh);
            }
            if cfg.appearance_drift > 0.0 {
                let id = &mut objects[0].identity;
                for v in id.iter_mut() {
                    *v += drift.sample(&mut rng);
                }
                let norm = id.iter().map(|x| x * x).sum::<f64>().sqrt();
                id.iter_mut().for_each(|v| *v /= norm);
            }
            if occlusion_left > 0 {
                occlusion_left -= 1;
            } else if rng.random_bool(cfg.occlusion_prob) {
                occlusion_left = cfg.occlusion_len;
            }
        }
        scenes.push(SceneState {
            frame,
            width: cfg.frame_width,
            height: cfg.frame_height,
            objects: objects.clone(),
            target_index: 0,
            occluded: occlusion_left > 0,
        });
    }
    let groundtruth = scenes.iter().map(|s| s.target().bbox).collect();
    Ok(Sequence { scenes, groundtruth })
}

// Spatial frequencies (cycles per box side) keyed to identity components.
const TEXTURE_FREQS: [(f64, f64); 8] =
    [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0), (2.0, 0.0), (0.0, 2.0), (2.0, 1.0), (1.0, 2.0)];

fn texture(identity: &[f64], u: f64, v: f64) -> f64 {
    identity
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let (fx, fy) = TEXTURE_FREQS[k % TEXTURE_FREQS.len()];
            let phase = 0.5 * (k / TEXTURE_FREQS.len()) as f64;
            a * (2.0 * PI * (fx * u + fy * v) + phase).cos()
        })
        .sum()
}

/// Render a grayscale frame: noisy background, then textured rectangles.
/// An occluded target is overdrawn with a flat background-level patch.
pub fn render_frame(scene: &SceneState, cfg: &SimConfig, seed: u64) -> GrayImage {
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene.frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let noise = Normal::new(0.0, cfg.background_noise).expect("validated sigma");
    let mut px: Vec<f64> = (0..w * h).map(|_| cfg.background_level + noise.sample(&mut rng)).collect();
    let mut order: Vec<usize> = (0..scene.objects.len()).filter(|&k| k != scene.target_index).collect();
    if scene.target_index < scene.objects.len() {
        order.push(scene.target_index);
    }
    for k in order {
        let o = &scene.objects[k];
        let b = &o.bbox;
        let x0 = b.x0().max(0.0).floor() as usize;
        let y0 = b.y0().max(0.0).floor() as usize;
        let x1 = (b.x1().ceil() as usize).min(w);
        let y1 = (b.y1().ceil() as usize).min(h);
        let hidden = scene.occluded && k == scene.target_index;
        for y in y0..y1 {
            for x in x0..x1 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !b.contains_point(cx, cy) {
                    continue;
                }
                px[y * w + x] = if hidden {
                    cfg.background_level
                } else {
                    let u = (cx - b.x0()) / b.w;
                    let v = (cy - b.y0()) / b.h;
                    140.0 + 40.0 * o.amplitude * texture(&o.identity, u, v)
                };
            }
        }
    }
    GrayImage { width: w, height: h, pixels: px.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    Oracle,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub mode: SequenceMode,
    pub seed: u64,
    pub length: usize,
    pub config: serde_json::Value,
}

/// A sequence as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub meta: SequenceMeta,
    pub groundtruth: Vec<BBox>,
    /// Present in oracle mode.
    pub scenes: Option<Vec<SceneState>>,
    /// Present in image mode.
    pub frames: Option<Vec<PathBuf>>,
}

impl SequenceData {
    pub fn len(&self) -> usize {
        self.groundtruth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groundtruth.is_empty()
    }
}

pub fn format_groundtruth(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| {
            let [x, y, w, h] = b.to_xywh();
            format!("{x},{y},{w},{h}\n")
        })
        .collect()
}

pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Malformed(format!("groundtruth line {}: {e}", k + 1)))?;
            if v.len() != 4 {
                return Err(Error::Malformed(format!("groundtruth line {} needs 4 fields", k + 1)));
            }
            BBox::from_xywh(v[0], v[1], v[2], v[3])
        })
        .collect()
}

pub fn frame_file_name(k: usize) -> String {
    format!("{k:08}.pgm")
}

/// Encoded sequence directory contents as (relative path, bytes), in a
/// fixed order.
pub fn encode_sequence(seq: &Sequence, cfg: &SimConfig, mode: SequenceMode, config_echo: serde_json::Value) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    match mode {
        SequenceMode::Oracle => {
            let mut out = String::new();
            for s in &seq.scenes {
                out.push_str(&serde_json::to_string(s).map_err(|e| Error::Malformed(e.to_string()))?);
                out.push('\n');
            }
            files.push(("scene.jsonl".to_string(), out.into_bytes()));
        }
        SequenceMode::Image => {
            for s in &seq.scenes {
                files.push((frame_file_name(s.frame), render_frame(s, cfg, cfg.seed).to_pgm()));
            }
        }
    }
    files.push(("groundtruth.txt".to_string(), format_groundtruth(&seq.groundtruth).into_bytes()));
    let meta = SequenceMeta { mode, seed: cfg.seed, length: seq.scenes.len(), config: config_echo };
    let mut meta_text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Malformed(e.to_string()))?;
    meta_text.push('\n');
    files.push(("meta.json".to_string(), meta_text.into_bytes()));
    Ok(files)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

pub fn load_sequence(dir: &Path) -> Result<SequenceData> {
    let meta: SequenceMeta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)
        .map_err(|e| Error::Malformed(format!("meta.json: {e}")))?;
    let groundtruth = parse_groundtruth(&read_text(&dir.join("groundtruth.txt"))?)?;
    if groundtruth.len() < 2 {
        return Err(Error::Malformed("sequence needs at least two frames".into()));
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut data = SequenceData { name, meta, groundtruth, scenes: None, frames: None };
    match data.meta.mode {
        SequenceMode::Oracle => {
            let scenes = read_text(&dir.join("scene.jsonl"))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str::<SceneState>(l).map_err(|e| Error::Malformed(format!("scene.jsonl: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if scenes.len() != data.groundtruth.len() {
                return Err(Error::Malformed("scene count differs from groundtruth length".into()));
            }
            if scenes.iter().any(|s| s.target_index >= s.objects.len()) {
                return Err(Error::Malformed("scene target index out of range".into()));
            }
            data.scenes = Some(scenes);
        }
        SequenceMode::Image => {
            let frames: Vec<PathBuf> = (0..data.groundtruth.len()).map(|k| dir.join(frame_file_name(k))).collect();
            if let Some(missing) = frames.iter().find(|p| !p.is_file()) {
                return Err(Error::Malformed(format!("missing frame {}", missing.display())));
            }
            data.frames = Some(frames);
        }
    }
    Ok(data)
}
