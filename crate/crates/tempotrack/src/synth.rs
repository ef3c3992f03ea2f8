//! Synthetic RGB-T sequence generator with scripted challenge events and
//! exact ground truth.
//!
//! A two-tone elliptical target moves smoothly over a gently structured
//! background. Scripted spans make one modality uninformative (the target is
//! simply not drawn there) or morph the target's shape and appearance, which
//! is what gives modality fusion and template adaptation something
//! measurable to win.

use std::path::{Path, PathBuf};

use tempotrack_tensor::Rng;

use crate::boxes::BBox;
use crate::error::{ModelError, Result};
use crate::imageio::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Target invisible in RGB (low-illumination analogue).
    RgbBlackout,
    /// Target invisible in TIR (thermal-crossover analogue).
    TirCrossover,
    /// Partial occlusion in both modalities.
    Occlusion,
    /// Progressive, persistent shape + appearance morph.
    Deformation,
}

impl EventKind {
    pub fn attribute_tag(self) -> &'static str {
        match self {
            EventKind::RgbBlackout => "LI",
            EventKind::TirCrossover => "TC",
            EventKind::Occlusion => "PO",
            EventKind::Deformation => "DEF",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        match s {
            "rgb_blackout" => Some(EventKind::RgbBlackout),
            "tir_crossover" => Some(EventKind::TirCrossover),
            "occlusion" => Some(EventKind::Occlusion),
            "deformation" => Some(EventKind::Deformation),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EventSpan {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Base target half-width in pixels.
    pub target_half_w: f64,
    pub target_half_h: f64,
    /// Trajectory cycles per 100 frames.
    pub speed: f64,
    /// Relative size oscillation amplitude.
    pub scale_amp: f64,
    /// Gaussian pixel noise sigma, 8-bit units.
    pub noise: f64,
    /// Morph intensity reached by the end of a deformation span.
    pub deform_strength: f64,
    /// Draw a second, independently moving object whose appearance stays
    /// close to the target's initial look. Matching then has to be
    /// template-conditioned instead of plain saliency.
    pub distractor: bool,
    pub events: Vec<EventSpan>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 200,
            width: 96,
            height: 96,
            target_half_w: 9.0,
            target_half_h: 7.0,
            speed: 0.6,
            scale_amp: 0.15,
            noise: 4.0,
            deform_strength: 1.0,
            distractor: true,
            events: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width < 48 || self.height < 48 {
            return Err(ModelError::Config(
                "synthetic sequences need frames >= 1 and at least 48x48 pixels".into(),
            ));
        }
        for e in &self.events {
            if e.start >= e.end || e.end > self.frames {
                return Err(ModelError::Config(format!(
                    "event span {}..{} outside 0..{}",
                    e.start, e.end, self.frames
                )));
            }
        }
        Ok(())
    }

    fn morph_at(&self, frame: usize) -> f64 {
        let mut m = 0.0f64;
        for e in &self.events {
            if e.kind != EventKind::Deformation {
                continue;
            }
            let v = if frame >= e.end {
                1.0
            } else if frame >= e.start {
                (frame - e.start) as f64 / (e.end - e.start) as f64
            } else {
                0.0
            };
            m = m.max(v * self.deform_strength);
        }
        m
    }

    fn active(&self, kind: EventKind, frame: usize) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == kind && (e.start..e.end).contains(&frame))
    }
}

struct Appearance {
    band_rgb: [f64; 3],
    core_rgb: [f64; 3],
    band_rgb_alt: [f64; 3],
    core_rgb_alt: [f64; 3],
    band_tir: f64,
    core_tir: f64,
    band_tir_alt: f64,
    core_tir_alt: f64,
}

struct Background {
    base_rgb: f64,
    base_tir: f64,
    grad_x: f64,
    grad_y: f64,
    wave_kx: f64,
    wave_ky: f64,
    wave_phase: f64,
    wave_amp: f64,
}

impl Background {
    fn rgb_at(&self, x: f64, y: f64) -> f64 {
        self.base_rgb + self.grad_x * x + self.grad_y * y + self.wave(x, y)
    }

    fn tir_at(&self, x: f64, y: f64) -> f64 {
        self.base_tir + 0.25 * (self.grad_x * x + self.grad_y * y) + 0.3 * self.wave(x, y)
    }

    fn wave(&self, x: f64, y: f64) -> f64 {
        self.wave_amp * (self.wave_kx * x + self.wave_ky * y + self.wave_phase).sin()
    }
}

struct Trajectory {
    cx0: f64,
    cy0: f64,
    ax: f64,
    ay: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    fs: f64,
    ps: f64,
}

impl Trajectory {
    fn at(&self, cfg: &SynthConfig, t: usize) -> (f64, f64, f64) {
        let tf = t as f64;
        let x = self.cx0 + self.ax * (std::f64::consts::TAU * self.fx * tf + self.px).sin();
        let y = self.cy0 + self.ay * (std::f64::consts::TAU * self.fy * tf + self.py).sin();
        let scale = 1.0 + cfg.scale_amp * (std::f64::consts::TAU * self.fs * tf + self.ps).sin();
        (x, y, scale)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

fn clamp8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Ellipse half-axes at a frame, including scale oscillation and morph.
fn axes_at(cfg: &SynthConfig, scale: f64, morph: f64) -> (f64, f64) {
    let ax = cfg.target_half_w * scale * (1.0 + 0.55 * morph);
    let ay = cfg.target_half_h * scale * (1.0 - 0.30 * morph);
    (ax, ay)
}

/// Generate a sequence on disk in the standard layout. Returns the per-frame
/// ground-truth boxes.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<Vec<BBox>> {
    cfg.validate()?;
    let rgb_dir = dir.join("visible");
    let tir_dir = dir.join("infrared");
    std::fs::create_dir_all(&rgb_dir).map_err(|e| ModelError::io(rgb_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&tir_dir).map_err(|e| ModelError::io(tir_dir.display().to_string(), e))?;

    let mut master = Rng::new(cfg.seed);
    let mut traj_rng = master.split();
    let mut look_rng = master.split();
    let mut noise_rng = master.split();

    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let margin_x = cfg.target_half_w * 2.4 + 4.0;
    let margin_y = cfg.target_half_h * 2.4 + 4.0;
    let traj = Trajectory {
        cx0: w / 2.0,
        cy0: h / 2.0,
        ax: (w / 2.0 - margin_x).max(4.0),
        ay: (h / 2.0 - margin_y).max(4.0),
        fx: cfg.speed / 100.0 * traj_rng.uniform_in(0.8, 1.2),
        fy: cfg.speed / 100.0 * traj_rng.uniform_in(0.55, 0.9),
        px: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
        py: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
        fs: cfg.speed / 100.0 * 0.7,
        ps: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
    };

    let bg = Background {
        base_rgb: look_rng.uniform_in(85.0, 105.0),
        base_tir: look_rng.uniform_in(32.0, 44.0),
        grad_x: look_rng.uniform_in(-0.25, 0.25),
        grad_y: look_rng.uniform_in(-0.2, 0.2),
        wave_kx: std::f64::consts::TAU / look_rng.uniform_in(55.0, 75.0),
        wave_ky: std::f64::consts::TAU / look_rng.uniform_in(55.0, 75.0),
        wave_phase: look_rng.uniform_in(0.0, std::f64::consts::TAU),
        wave_amp: look_rng.uniform_in(6.0, 9.0),
    };

    let jitter = |rng: &mut Rng, c: [f64; 3], amt: f64| {
        [
            c[0] + rng.uniform_in(-amt, amt),
            c[1] + rng.uniform_in(-amt, amt),
            c[2] + rng.uniform_in(-amt, amt),
        ]
    };
    let look = Appearance {
        band_rgb: jitter(&mut look_rng, [208.0, 72.0, 58.0], 18.0),
        core_rgb: jitter(&mut look_rng, [244.0, 206.0, 82.0], 18.0),
        band_rgb_alt: jitter(&mut look_rng, [66.0, 92.0, 214.0], 18.0),
        core_rgb_alt: jitter(&mut look_rng, [92.0, 220.0, 198.0], 18.0),
        band_tir: 198.0,
        core_tir: 242.0,
        band_tir_alt: 238.0,
        core_tir_alt: 132.0,
    };
    // the distractor keeps wearing the target's INITIAL appearance for the
    // whole sequence: after a deformation, an initial-template matcher has
    // two candidates and the wrong one looks more familiar
    let distractor_look = Appearance {
        band_rgb: jitter(&mut look_rng, look.band_rgb, 7.0),
        core_rgb: jitter(&mut look_rng, look.core_rgb, 7.0),
        band_rgb_alt: [0.0; 3],
        core_rgb_alt: [0.0; 3],
        band_tir: look.band_tir - 9.0,
        core_tir: look.core_tir - 9.0,
        band_tir_alt: 0.0,
        core_tir_alt: 0.0,
    };
    let distractor_traj = Trajectory {
        cx0: w / 2.0,
        cy0: h / 2.0,
        ax: (w / 2.0 - margin_x).max(4.0),
        ay: (h / 2.0 - margin_y).max(4.0),
        // similar pace to the target so their paths cross regularly
        fx: cfg.speed / 100.0 * traj_rng.uniform_in(0.85, 1.15),
        fy: cfg.speed / 100.0 * traj_rng.uniform_in(0.6, 0.95),
        px: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
        py: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
        fs: cfg.speed / 100.0 * 0.5,
        ps: traj_rng.uniform_in(0.0, std::f64::consts::TAU),
    };

    let draw_ellipse = |rgb: &mut RgbImage,
                        tir: &mut RgbImage,
                        cx: f64,
                        cy: f64,
                        ax: f64,
                        ay: f64,
                        band_rgb: [f64; 3],
                        core_rgb: [f64; 3],
                        band_tir: f64,
                        core_tir: f64,
                        draw_rgb: bool,
                        draw_tir: bool| {
        let x_lo = ((cx - ax).floor().max(0.0)) as usize;
        let x_hi = ((cx + ax).ceil().min(w - 1.0)) as usize;
        let y_lo = ((cy - ay).floor().max(0.0)) as usize;
        let y_hi = ((cy + ay).ceil().min(h - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let nx = (x as f64 - cx) / ax;
                let ny = (y as f64 - cy) / ay;
                let r2 = nx * nx + ny * ny;
                if r2 > 1.0 {
                    continue;
                }
                let core = r2 < 0.55 * 0.55;
                if draw_rgb {
                    let c = if core { core_rgb } else { band_rgb };
                    rgb.put(x, y, [clamp8(c[0]), clamp8(c[1]), clamp8(c[2])]);
                }
                if draw_tir {
                    let v = clamp8(if core { core_tir } else { band_tir });
                    tir.put(x, y, [v, v, v]);
                }
            }
        }
    };

    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let (cx, cy, scale) = traj.at(cfg, t);
        let morph = cfg.morph_at(t);
        let (ax, ay) = axes_at(cfg, scale, morph);
        boxes.push(BBox::new(cx, cy, 2.0 * ax, 2.0 * ay));

        let mut rgb = RgbImage::new(cfg.width, cfg.height);
        let mut tir = RgbImage::new(cfg.width, cfg.height);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let v = bg.rgb_at(x as f64, y as f64);
                rgb.put(x, y, [clamp8(v), clamp8(v * 0.97), clamp8(v * 1.02)]);
                let tv = clamp8(bg.tir_at(x as f64, y as f64));
                tir.put(x, y, [tv, tv, tv]);
            }
        }

        let draw_rgb = !cfg.active(EventKind::RgbBlackout, t);
        let draw_tir = !cfg.active(EventKind::TirCrossover, t);

        if cfg.distractor {
            // drawn first: the target wins any overlap
            let (dx, dy, dscale) = distractor_traj.at(cfg, t);
            let dax = cfg.target_half_w * 0.95 * dscale;
            let day = cfg.target_half_h * 0.95 * dscale;
            draw_ellipse(
                &mut rgb,
                &mut tir,
                dx,
                dy,
                dax,
                day,
                distractor_look.band_rgb,
                distractor_look.core_rgb,
                distractor_look.band_tir,
                distractor_look.core_tir,
                true,
                true,
            );
        }

        let band_rgb = lerp3(look.band_rgb, look.band_rgb_alt, morph);
        let core_rgb = lerp3(look.core_rgb, look.core_rgb_alt, morph);
        let band_tir = lerp(look.band_tir, look.band_tir_alt, morph);
        let core_tir = lerp(look.core_tir, look.core_tir_alt, morph);
        draw_ellipse(
            &mut rgb,
            &mut tir,
            cx,
            cy,
            ax,
            ay,
            band_rgb,
            core_rgb,
            band_tir,
            core_tir,
            draw_rgb,
            draw_tir,
        );
        let (y_lo, y_hi) = (
            ((cy - ay).floor().max(0.0)) as usize,
            ((cy + ay).ceil().min(h - 1.0)) as usize,
        );

        if cfg.active(EventKind::Occlusion, t) {
            // vertical bar over the middle of the target, both modalities
            let bar_half = (ax * 0.35).max(1.5);
            let bx_lo = ((cx - bar_half).floor().max(0.0)) as usize;
            let bx_hi = ((cx + bar_half).ceil().min(w - 1.0)) as usize;
            for y in y_lo.saturating_sub(3)..=(y_hi + 3).min(cfg.height - 1) {
                for x in bx_lo..=bx_hi {
                    rgb.put(x, y, [72, 74, 78]);
                    tir.put(x, y, [55, 55, 55]);
                }
            }
        }

        // sensor noise, both modalities
        for img in [&mut rgb, &mut tir] {
            for p in img.pixels.iter_mut() {
                *p = clamp8(*p as f64 + noise_rng.normal() * cfg.noise);
            }
        }

        rgb.save_png(&rgb_dir.join(format!("{t:05}.png")))?;
        tir.save_png(&tir_dir.join(format!("{t:05}.png")))?;
    }

    let gt_text: String = boxes
        .iter()
        .map(|b| {
            let (x, y, bw, bh) = b.to_xywh();
            format!("{x:.3},{y:.3},{bw:.3},{bh:.3}\n")
        })
        .collect();
    let gt_path = dir.join("groundtruth.txt");
    std::fs::write(&gt_path, gt_text).map_err(|e| ModelError::io(gt_path.display().to_string(), e))?;

    let attr_text: String = cfg
        .events
        .iter()
        .map(|e| format!("{} {} {}\n", e.kind.attribute_tag(), e.start, e.end))
        .collect();
    let attr_path = dir.join("attributes.txt");
    std::fs::write(&attr_path, attr_text)
        .map_err(|e| ModelError::io(attr_path.display().to_string(), e))?;

    Ok(boxes)
}

/// Event layout with blackouts and a persistent deformation, randomized per
/// seed. Positions scale with the sequence length; the opening stretch stays
/// clean so the init template is always reliable.
pub fn eventful_config(seed: u64, frames: usize) -> SynthConfig {
    let mut rng = Rng::new(seed ^ 0xA5A5_5A5A);
    let mut events = Vec::new();
    let frac = |f: f64| ((frames as f64 * f) as usize).min(frames.saturating_sub(1));
    let mut span = |kind, start: usize, len: usize| {
        let end = (start + len.max(1)).min(frames);
        if start < end {
            events.push(EventSpan { kind, start, end });
        }
    };

    let b1_start = frac(0.20 + 0.15 * rng.uniform());
    span(EventKind::RgbBlackout, b1_start, frac(0.15));
    if frames >= 170 {
        let b2_start = frac(0.70 + 0.08 * rng.uniform());
        span(EventKind::RgbBlackout, b2_start, frac(0.10));
    }
    let d_start = frac(0.48 + 0.10 * rng.uniform());
    span(EventKind::Deformation, d_start, frac(0.18));
    span(EventKind::Occlusion, frac(0.15), frac(0.04));

    SynthConfig {
        frames,
        seed,
        events,
        ..SynthConfig::default()
    }
}

/// Clean configuration for RGB-only pretraining data.
pub fn clean_config(seed: u64, frames: usize) -> SynthConfig {
    SynthConfig {
        frames,
        seed,
        events: Vec::new(),
        ..SynthConfig::default()
    }
}

/// Generate `count` sequences under `root` as seq000, seq001, ...
pub fn generate_dataset(
    root: &Path,
    count: usize,
    frames: usize,
    eventful: bool,
    base_seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9)
            ^ base_seed.rotate_left(17);
        let cfg = if eventful {
            eventful_config(seed, frames)
        } else {
            clean_config(seed, frames)
        };
        let dir = root.join(format!("seq{i:03}"));
        generate_synthetic(&cfg, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// |mean inside the box - mean in the surrounding ring|, averaged over
/// channels. The ring is the 1.6x-dilated box minus the box.
pub fn target_contrast(img: &RgbImage, gt: &BBox) -> f64 {
    let inside_of = |b: &BBox, x: f64, y: f64| {
        x >= b.left() && x < b.right() && y >= b.top() && y < b.bottom()
    };
    let ring_box = BBox::new(gt.cx, gt.cy, gt.w * 1.6, gt.h * 1.6);
    let mut sum_in = [0f64; 3];
    let mut n_in = 0usize;
    let mut sum_ring = [0f64; 3];
    let mut n_ring = 0usize;
    for y in 0..img.height {
        for x in 0..img.width {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside_of(gt, xf, yf) {
                let p = img.get(x, y);
                for c in 0..3 {
                    sum_in[c] += p[c] as f64;
                }
                n_in += 1;
            } else if inside_of(&ring_box, xf, yf) {
                let p = img.get(x, y);
                for c in 0..3 {
                    sum_ring[c] += p[c] as f64;
                }
                n_ring += 1;
            }
        }
    }
    if n_in == 0 || n_ring == 0 {
        return 0.0;
    }
    (0..3)
        .map(|c| (sum_in[c] / n_in as f64 - sum_ring[c] / n_ring as f64).abs())
        .sum::<f64>()
        / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LoadedSequence;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("tempotrack_synth_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn same_seed_bit_identical_frames() {
        let cfg = SynthConfig {
            frames: 5,
            ..eventful_config(42, 5)
        };
        let d1 = tmp("det1");
        let d2 = tmp("det2");
        generate_synthetic(&cfg, &d1).unwrap();
        generate_synthetic(&cfg, &d2).unwrap();
        for i in 0..5 {
            let a = std::fs::read(d1.join(format!("visible/{i:05}.png"))).unwrap();
            let b = std::fs::read(d2.join(format!("visible/{i:05}.png"))).unwrap();
            assert_eq!(a, b, "frame {i} differs");
        }
    }

    #[test]
    fn ground_truth_follows_scripted_trajectory() {
        let cfg = clean_config(7, 12);
        let dir = tmp("gt");
        let boxes = generate_synthetic(&cfg, &dir).unwrap();
        let seq = LoadedSequence::load(&dir).unwrap();
        assert_eq!(seq.len(), 12);
        for (a, b) in boxes.iter().zip(&seq.meta.boxes) {
            assert!((a.cx - b.cx).abs() < 1e-3);
            assert!((a.w - b.w).abs() < 1e-3);
        }
    }

    #[test]
    fn blackout_kills_rgb_contrast_but_not_tir() {
        let mut cfg = clean_config(11, 40);
        // keep the ring clean of the distractor for the contrast measurement
        cfg.distractor = false;
        cfg.events.push(EventSpan {
            kind: EventKind::RgbBlackout,
            start: 10,
            end: 30,
        });
        let dir = tmp("blackout");
        let boxes = generate_synthetic(&cfg, &dir).unwrap();
        let seq = LoadedSequence::load(&dir).unwrap();
        for &t in &[12usize, 20, 29] {
            let rgb_c = target_contrast(&seq.frames[t].0, &boxes[t]);
            let tir_c = target_contrast(&seq.frames[t].1, &boxes[t]);
            assert!(rgb_c < cfg.noise, "frame {t}: rgb contrast {rgb_c}");
            assert!(tir_c > 5.0 * cfg.noise, "frame {t}: tir contrast {tir_c}");
        }
        // outside the span the target is visible in both
        for &t in &[5usize, 35] {
            let rgb_c = target_contrast(&seq.frames[t].0, &boxes[t]);
            assert!(rgb_c > 5.0 * cfg.noise, "frame {t}: rgb contrast {rgb_c}");
        }
    }

    #[test]
    fn attribute_sidecar_matches_events() {
        let cfg = eventful_config(3, 200);
        let dir = tmp("attrs");
        generate_synthetic(&cfg, &dir).unwrap();
        let seq = LoadedSequence::load(&dir).unwrap();
        let li_frames = seq.meta.frames_with_attribute("LI");
        let expected: Vec<usize> = (0..200)
            .filter(|&t| cfg.active(EventKind::RgbBlackout, t))
            .collect();
        assert_eq!(li_frames, expected);
    }

    #[test]
    fn deformation_changes_box_aspect_persistently() {
        let mut cfg = clean_config(5, 60);
        cfg.events.push(EventSpan {
            kind: EventKind::Deformation,
            start: 20,
            end: 40,
        });
        let dir = tmp("deform");
        let boxes = generate_synthetic(&cfg, &dir).unwrap();
        let aspect = |b: &BBox| b.w / b.h;
        let early: f64 = (0..10).map(|t| aspect(&boxes[t])).sum::<f64>() / 10.0;
        let late: f64 = (50..60).map(|t| aspect(&boxes[t])).sum::<f64>() / 10.0;
        assert!(late > early * 1.5, "early {early}, late {late}");
    }

    #[test]
    fn events_outside_range_rejected() {
        let mut cfg = clean_config(1, 10);
        cfg.events.push(EventSpan {
            kind: EventKind::Occlusion,
            start: 5,
            end: 20,
        });
        assert!(generate_synthetic(&cfg, &tmp("bad")).is_err());
    }
}
