//! Per-sequence inference: crop management around the last prediction, the
//! dual-branch forward, box decoding back to image coordinates, and the
//! max-confidence online template selection policy.

use std::path::Path;
use std::time::Instant;

use tempotrack_tensor::{Graph, Scalar};

use crate::boxes::BBox;
use crate::crops::{crop_pair, CropSpec, CropWindow};
use crate::dataset::LoadedSequence;
use crate::error::{ModelError, Result};
use crate::imageio::RgbImage;
use crate::model::{decode_box, FramePair, TrackModel};

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    /// Swap the online template every this many frames; `None` never updates.
    pub update_interval: Option<usize>,
    /// Optional confidence gate for update candidates (off by default: the
    /// policy is pure max-in-interval).
    pub confidence_floor: Option<f64>,
    pub crop: CropSpec,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            update_interval: Some(50),
            confidence_floor: None,
            crop: CropSpec::default(),
        }
    }
}

/// Pure interval/argmax state machine for online template selection.
///
/// Scores are observed once per tracked frame; when the interval elapses the
/// best-scoring frame of that interval is selected and the window restarts.
#[derive(Clone, Debug)]
pub struct OtsPolicy {
    pub interval: Option<usize>,
    since_update: usize,
    best: Option<(usize, f64)>,
}

impl OtsPolicy {
    pub fn new(interval: Option<usize>) -> Self {
        OtsPolicy {
            interval,
            since_update: 0,
            best: None,
        }
    }

    pub fn frames_since_update(&self) -> usize {
        self.since_update
    }

    pub fn best_candidate(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Observe one frame's confidence. `eligible` gates candidate recording
    /// (used by the optional confidence floor). Returns the selected frame
    /// when an update fires.
    pub fn observe_gated(&mut self, frame: usize, score: f64, eligible: bool) -> Option<usize> {
        if eligible && self.best.map(|(_, s)| score > s).unwrap_or(true) {
            self.best = Some((frame, score));
        }
        self.since_update += 1;
        if let Some(k) = self.interval {
            if self.since_update >= k {
                self.since_update = 0;
                return self.best.take().map(|(f, _)| f);
            }
        }
        None
    }

    pub fn observe(&mut self, frame: usize, score: f64) -> Option<usize> {
        self.observe_gated(frame, score, true)
    }
}

pub struct TrackerState<F: Scalar> {
    pub prev_box: BBox,
    init_template: FramePair<F>,
    online_template: FramePair<F>,
    pending_candidate: Option<FramePair<F>>,
    policy: OtsPolicy,
    frame_idx: usize,
    frame_size: (usize, usize),
    cfg: RuntimeConfig,
}

impl<F: Scalar> TrackerState<F> {
    /// Crop the first-frame templates and reset all counters. The online
    /// template starts as a copy of the initial one.
    pub fn init(
        model: &TrackModel<F>,
        cfg: RuntimeConfig,
        frame: (&RgbImage, &RgbImage),
        box0: &BBox,
    ) -> Result<Self> {
        cfg.crop.validate()?;
        box0.validate()
            .map_err(|_| ModelError::Input(format!("degenerate init box ({}, {})", box0.w, box0.h)))?;
        let (rgb, tir) = frame;
        if box0.cx < 0.0 || box0.cy < 0.0 || box0.cx >= rgb.width as f64 || box0.cy >= rgb.height as f64 {
            return Err(ModelError::Input("init box center outside the frame".into()));
        }
        let window = CropWindow::around(box0, cfg.crop.area_factor_template)?;
        let side = model.cfg.backbone.template_side;
        let (crop_rgb, crop_tir) = crop_pair::<F>(rgb, tir, &window, side)?;
        let template = FramePair::new(crop_rgb.tensor, crop_tir.tensor);
        Ok(TrackerState {
            prev_box: *box0,
            init_template: template.clone(),
            online_template: template,
            pending_candidate: None,
            policy: OtsPolicy::new(cfg.update_interval),
            frame_idx: 0,
            frame_size: (rgb.width, rgb.height),
            cfg,
        })
    }

    pub fn frames_since_update(&self) -> usize {
        self.policy.frames_since_update()
    }

    /// True while the online template still equals the initial one.
    pub fn online_is_initial(&self) -> bool {
        self.online_template
            .rgb
            .data()
            .iter()
            .zip(self.init_template.rgb.data())
            .all(|(a, b)| a == b)
    }

    /// Track one frame: search around the previous box, forward, decode, map
    /// back to image coordinates and run the template-update bookkeeping.
    pub fn track_frame(
        &mut self,
        model: &TrackModel<F>,
        frame: (&RgbImage, &RgbImage),
    ) -> Result<(BBox, f64)> {
        let (rgb, tir) = frame;
        if (rgb.width, rgb.height) != self.frame_size {
            return Err(ModelError::Input(format!(
                "frame size changed mid-sequence: {}x{} vs {}x{}",
                rgb.width, rgb.height, self.frame_size.0, self.frame_size.1
            )));
        }
        let window = CropWindow::around(&self.prev_box, self.cfg.crop.area_factor_search)?;
        let side = model.cfg.backbone.search_side;
        let (search_rgb, search_tir) = crop_pair::<F>(rgb, tir, &window, side)?;
        let search = FramePair::new(search_rgb.tensor, search_tir.tensor);

        let mut g = Graph::no_grad();
        let maps = model.forward(
            &mut g,
            &self.init_template,
            &self.online_template,
            &search,
            false,
        )?;
        let (norm_box, confidence) =
            decode_box(g.value(maps.score), g.value(maps.offset), g.value(maps.size));
        let mut image_box = window.to_image(&norm_box);

        // keep the next search window anchored inside the frame, and damp
        // the size feedback: the window side scales with the box estimate,
        // so unbounded per-frame size jumps compound exponentially
        let (w, h) = (self.frame_size.0 as f64, self.frame_size.1 as f64);
        image_box.cx = image_box.cx.clamp(0.0, w - 1.0);
        image_box.cy = image_box.cy.clamp(0.0, h - 1.0);
        image_box.w = image_box
            .w
            .clamp(self.prev_box.w * 0.75, self.prev_box.w * 1.33)
            .clamp(4.0, w);
        image_box.h = image_box
            .h
            .clamp(self.prev_box.h * 0.75, self.prev_box.h * 1.33)
            .clamp(4.0, h);
        self.prev_box = image_box;

        if model.cfg.variant.dual_branch && self.cfg.update_interval.is_some() {
            self.record_candidate(model, frame, &image_box, confidence)?;
        }
        self.frame_idx += 1;
        Ok((image_box, confidence))
    }

    /// Store the candidate crop taken at prediction time, then let the policy
    /// decide whether this frame completes an interval.
    fn record_candidate(
        &mut self,
        model: &TrackModel<F>,
        frame: (&RgbImage, &RgbImage),
        image_box: &BBox,
        confidence: f64,
    ) -> Result<()> {
        let eligible = self.cfg.confidence_floor.map(|f| confidence >= f).unwrap_or(true);
        let was_best = self
            .policy
            .best_candidate()
            .map(|(_, s)| confidence > s)
            .unwrap_or(true);
        if eligible && was_best {
            let window = CropWindow::around(image_box, self.cfg.crop.area_factor_template)?;
            let side = model.cfg.backbone.template_side;
            let (crop_rgb, crop_tir) = crop_pair::<F>(frame.0, frame.1, &window, side)?;
            self.pending_candidate = Some(FramePair::new(crop_rgb.tensor, crop_tir.tensor));
        }
        if self
            .policy
            .observe_gated(self.frame_idx, confidence, eligible)
            .is_some()
        {
            if let Some(candidate) = self.pending_candidate.take() {
                self.online_template = candidate;
            }
        }
        Ok(())
    }
}

/// Result of tracking a whole sequence.
pub struct TrackRun {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    pub fps: f64,
}

/// Track a loaded sequence end to end. Frame 0 initializes from ground
/// truth and is reported as the ground-truth box (standard protocol).
pub fn track_sequence<F: Scalar>(
    model: &TrackModel<F>,
    cfg: RuntimeConfig,
    seq: &LoadedSequence,
) -> Result<TrackRun> {
    if seq.is_empty() {
        return Err(ModelError::Input("empty sequence".into()));
    }
    let first = &seq.frames[0];
    let mut state = TrackerState::init(model, cfg, (&first.0, &first.1), &seq.meta.boxes[0])?;
    let mut boxes = vec![seq.meta.boxes[0]];
    let mut confidences = vec![1.0];
    let start = Instant::now();
    for frame in &seq.frames[1..] {
        let (b, c) = state.track_frame(model, (&frame.0, &frame.1))?;
        boxes.push(b);
        confidences.push(c);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let fps = if elapsed > 0.0 {
        (seq.len() - 1) as f64 / elapsed
    } else {
        f64::INFINITY
    };
    Ok(TrackRun {
        boxes,
        confidences,
        fps,
    })
}

/// Write one `x,y,w,h` line per frame (image pixels, frame order).
pub fn write_results(path: &Path, boxes: &[BBox]) -> Result<()> {
    let text: String = boxes
        .iter()
        .map(|b| {
            let (x, y, w, h) = b.to_xywh();
            format!("{x:.2},{y:.2},{w:.2},{h:.2}\n")
        })
        .collect();
    std::fs::write(path, text).map_err(|e| ModelError::io(path.display().to_string(), e))
}

/// Sidecar confidence file: one value per line.
pub fn write_confidences(path: &Path, confidences: &[f64]) -> Result<()> {
    let text: String = confidences.iter().map(|c| format!("{c:.6}\n")).collect();
    std::fs::write(path, text).map_err(|e| ModelError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_selects_interval_max() {
        let mut p = OtsPolicy::new(Some(3));
        assert_eq!(p.observe(0, 0.3), None);
        assert_eq!(p.observe(1, 0.9), None);
        assert_eq!(p.observe(2, 0.5), Some(1)); // max of the window
        assert_eq!(p.frames_since_update(), 0);
        assert_eq!(p.observe(3, 0.2), None);
        assert_eq!(p.observe(4, 0.1), None);
        assert_eq!(p.observe(5, 0.15), Some(3));
    }

    #[test]
    fn no_update_before_interval_elapses() {
        let mut p = OtsPolicy::new(Some(50));
        for f in 0..49 {
            assert_eq!(p.observe(f, 0.99), None, "premature update at {f}");
        }
        assert_eq!(p.observe(49, 0.01), Some(0));
    }

    #[test]
    fn interval_one_updates_every_frame() {
        let mut p = OtsPolicy::new(Some(1));
        for f in 0..10 {
            assert_eq!(p.observe(f, 0.5), Some(f));
        }
    }

    #[test]
    fn interval_none_never_updates() {
        let mut p = OtsPolicy::new(None);
        for f in 0..200 {
            assert_eq!(p.observe(f, 1.0), None);
        }
    }

    #[test]
    fn ties_keep_the_earlier_frame() {
        let mut p = OtsPolicy::new(Some(3));
        p.observe(0, 0.7);
        p.observe(1, 0.7);
        assert_eq!(p.observe(2, 0.7), Some(0));
    }

    #[test]
    fn scripted_sequences_match_brute_force() {
        // brute force: chunk into windows of k, argmax each (first wins)
        let mut rng = tempotrack_tensor::Rng::new(77);
        for _case in 0..100 {
            let k = 1 + rng.below(10);
            let n = 20 + rng.below(80);
            let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 100.0).round() / 100.0).collect();

            let mut policy = OtsPolicy::new(Some(k));
            let mut got = Vec::new();
            for (f, &s) in scores.iter().enumerate() {
                if let Some(chosen) = policy.observe(f, s) {
                    got.push((f, chosen));
                }
            }

            let mut expected = Vec::new();
            let mut start = 0;
            while start + k <= n {
                let window = &scores[start..start + k];
                let mut best = 0usize;
                for (i, &v) in window.iter().enumerate() {
                    if v > window[best] {
                        best = i;
                    }
                }
                expected.push((start + k - 1, start + best));
                start += k;
            }
            assert_eq!(got, expected, "k = {k}");
        }
    }
}
