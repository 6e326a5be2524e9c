//! Drives the tracker over stored sequences under either protocol.

use std::fs;

use crate::error::{Error, Result};
use crate::eval::{kld, npd, run_one_pass, run_reset_protocol, FrameLog, HeatmapStats, Normalization, Protocol, ResetConfig, RunRecord, SequenceTracker};
use crate::features::{extract, FeatureConfig, FeatureMode, GrayImage};
use crate::geometry::{AnchorShape, BBox};
use crate::sim::{SequenceData, SequenceMode};
use crate::tracker::{FrameInput, FrameResult, Tracker, TrackerConfig};

pub type FrameHook<'a> = Box<dyn FnMut(usize, &FrameResult) -> Result<()> + 'a>;

/// Seed of the feature noise on frame `k` of a sequence.
pub fn feature_seed(sequence_seed: u64, k: usize) -> u64 {
    sequence_seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

#[derive(Default)]
struct Accum {
    sum: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            self.sum += v;
            self.n += 1;
        }
    }
    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Tracker bound to one sequence; features are computed on demand.
pub struct SequenceRunner<'a> {
    data: &'a SequenceData,
    features: FeatureConfig,
    cfg: &'a TrackerConfig,
    tracker: Option<Tracker>,
    logs: Vec<FrameLog>,
    kld_r: Accum,
    kld_a: Accum,
    npd_r: Accum,
    npd_a: Accum,
    frames_scored: usize,
    hook: Option<FrameHook<'a>>,
}

impl<'a> SequenceRunner<'a> {
    pub fn new(data: &'a SequenceData, features: &FeatureConfig, cfg: &'a TrackerConfig) -> Result<Self> {
        features.validate()?;
        cfg.validate()?;
        let mode = match data.meta.mode {
            SequenceMode::Oracle => FeatureMode::Oracle,
            SequenceMode::Image => FeatureMode::Image,
        };
        Ok(Self {
            data,
            features: FeatureConfig { mode, ..features.clone() },
            cfg,
            tracker: None,
            logs: Vec::new(),
            kld_r: Accum::default(),
            kld_a: Accum::default(),
            npd_r: Accum::default(),
            npd_a: Accum::default(),
            frames_scored: 0,
            hook: None,
        })
    }

    pub fn with_hook(mut self, hook: FrameHook<'a>) -> Self {
        self.hook = Some(hook);
        self
    }

    fn frame_image(&self, k: usize) -> Result<Option<GrayImage>> {
        match &self.data.frames {
            Some(paths) => {
                let path = paths.get(k).ok_or_else(|| Error::Malformed(format!("no frame {k}")))?;
                let bytes = fs::read(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
                Ok(Some(GrayImage::from_pgm(&bytes)?))
            }
            None => Ok(None),
        }
    }

    fn inputs(&self, k: usize) -> Result<(crate::correlation::FeaturePyramid, Option<Vec<BBox>>, (f64, f64))> {
        let scene = self.data.scenes.as_ref().map(|s| &s[k]);
        let image = self.frame_image(k)?;
        let pyr = extract(&self.features, scene, image.as_ref(), feature_seed(self.data.meta.seed, k))?;
        let size = match (scene, &image) {
            (Some(s), _) => (s.width as f64, s.height as f64),
            (None, Some(img)) => (img.width as f64, img.height as f64),
            (None, None) => return Err(Error::Malformed("sequence carries neither scenes nor frames".into())),
        };
        let boxes = scene.map(|s| s.visible().map(|o| o.bbox).collect());
        Ok((pyr, boxes, size))
    }

    fn record_heatmaps(&mut self, tracker: &Tracker, result: &FrameResult, gt: &BBox) -> Result<()> {
        let grid = result.region.score_grid(vec![AnchorShape { w: gt.w, h: gt.h }])?;
        let center = grid.to_grid(gt.cx, gt.cy);
        let inside = |v: f64| v >= 0.0 && v <= (grid.height - 1) as f64;
        if !inside(center.0) || !inside(center.1) {
            return Ok(());
        }
        self.frames_scored += 1;
        if let Some(map) = &result.robust {
            let target = tracker.cfg.robust_target(result, gt)?;
            self.kld_r.add(kld(&target.0, map, Normalization::Softmax).ok());
            self.npd_r.add(Some(npd(center, map)));
        }
        if let Some(map) = &result.accurate {
            let target = tracker.cfg.accurate_target(result, gt)?;
            self.kld_a.add(kld(&target.0, map, Normalization::Softmax).ok());
            self.npd_a.add(Some(npd(center, map)));
        }
        Ok(())
    }

    pub fn stats(&self) -> HeatmapStats {
        HeatmapStats {
            frames: self.frames_scored,
            kld_robust: self.kld_r.mean(),
            kld_accurate: self.kld_a.mean(),
            npd_robust: self.npd_r.mean(),
            npd_accurate: self.npd_a.mean(),
        }
    }

    pub fn logs(&self) -> &[FrameLog] {
        &self.logs
    }
}

impl SequenceTracker for SequenceRunner<'_> {
    fn start(&mut self, frame: usize, gt: &BBox) -> Result<()> {
        let (pyr, _, _) = self.inputs(frame)?;
        let mut cfg = self.cfg.clone();
        cfg.seed = self.cfg.seed ^ feature_seed(self.data.meta.seed, frame);
        self.tracker = Some(Tracker::initialize(&pyr, gt, &cfg)?);
        self.logs.push(FrameLog { frame, bbox: gt.to_xywh(), peak: 1.0, lost: false });
        Ok(())
    }

    fn track(&mut self, frame: usize) -> Result<BBox> {
        let (pyr, boxes, size) = self.inputs(frame)?;
        let mut tracker = self.tracker.take().ok_or_else(|| Error::InvalidArgument("tracker not started".into()))?;
        let input = FrameInput { features: &pyr, oracle_boxes: boxes.as_deref(), frame_size: size };
        let result = tracker.step(&input)?;
        let gt = self.data.groundtruth[frame];
        self.record_heatmaps(&tracker, &result, &gt)?;
        if let Some(hook) = self.hook.as_mut() {
            hook(frame, &result)?;
        }
        self.logs.push(FrameLog { frame, bbox: result.bbox.to_xywh(), peak: result.peak, lost: result.lost });
        self.tracker = Some(tracker);
        Ok(result.bbox)
    }
}

/// Run one sequence and attach per-frame logs and heatmap statistics.
pub fn run_sequence(
    data: &SequenceData,
    features: &FeatureConfig,
    cfg: &TrackerConfig,
    protocol: Protocol,
    reset: &ResetConfig,
    config_echo: serde_json::Value,
    hook: Option<FrameHook<'_>>,
) -> Result<RunRecord> {
    let mut runner = SequenceRunner::new(data, features, cfg)?;
    if let Some(h) = hook {
        runner = runner.with_hook(h);
    }
    let mut record = match protocol {
        Protocol::Reset => run_reset_protocol(&mut runner, &data.name, &data.groundtruth, reset, config_echo)?,
        Protocol::Ope => run_one_pass(&mut runner, &data.name, &data.groundtruth, config_echo)?,
    };
    record.frames = Some(runner.logs().to_vec());
    record.heatmaps = Some(runner.stats());
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_sequence, SceneState, SequenceMeta, SimConfig};

    fn oracle_data(sim: &SimConfig) -> SequenceData {
        let seq = gen_sequence(sim).unwrap();
        SequenceData {
            name: "t".into(),
            meta: SequenceMeta { mode: SequenceMode::Oracle, seed: sim.seed, length: sim.length, config: serde_json::Value::Null },
            groundtruth: seq.groundtruth,
            scenes: Some(seq.scenes),
            frames: None,
        }
    }

    #[test]
    fn runs_both_protocols() {
        let data = oracle_data(&SimConfig { length: 25, seed: 4, ..SimConfig::default() });
        let f = FeatureConfig::default();
        let t = TrackerConfig::default();
        for p in [Protocol::Reset, Protocol::Ope] {
            let r = run_sequence(&data, &f, &t, p, &ResetConfig::default(), serde_json::Value::Null, None).unwrap();
            r.validate().unwrap();
            assert_eq!(r.len(), 25);
            let logs = r.frames.as_ref().unwrap();
            assert!(logs.len() <= 25 && logs[0].frame == 0);
            let h = r.heatmaps.unwrap();
            assert!(h.kld_robust.unwrap() >= 0.0);
            assert!(h.npd_accurate.unwrap() <= 1.0);
        }
    }

    #[test]
    fn hook_sees_every_tracked_frame() {
        let data = oracle_data(&SimConfig { length: 15, seed: 9, ..SimConfig::default() });
        let mut seen = Vec::new();
        let hook: FrameHook = Box::new(|k, r: &FrameResult| {
            seen.push((k, r.fused.len()));
            Ok(())
        });
        run_sequence(&data, &FeatureConfig::default(), &TrackerConfig::default(), Protocol::Ope, &ResetConfig::default(), serde_json::Value::Null, Some(hook)).unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), (1..15).collect::<Vec<_>>());
        assert_eq!(seen[0].1, 21 * 21 * 5);
    }

    #[test]
    fn missing_inputs_are_malformed() {
        let mut data = oracle_data(&SimConfig { length: 12, ..SimConfig::default() });
        data.scenes = None::<Vec<SceneState>>;
        let r = run_sequence(&data, &FeatureConfig::default(), &TrackerConfig::default(), Protocol::Ope, &ResetConfig::default(), serde_json::Value::Null, None);
        assert!(r.is_err());
    }
}
