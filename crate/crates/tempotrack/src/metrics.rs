//! Benchmark metrics over result files: precision (center error), normalized
//! precision and success (IoU) with fixed 51-point threshold grids. This
//! module never touches the model; it consumes box lists only.

use crate::boxes::{iou, BBox};
use crate::error::{ModelError, Result};

/// Center-error threshold for the precision rate, pixels.
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
/// Points on each AUC grid.
pub const CURVE_POINTS: usize = 51;
/// Normalized-precision thresholds cover [0, 0.5].
pub const NORM_PRECISION_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct FrameEval {
    pub center_err: f64,
    pub norm_err: f64,
    pub iou: f64,
}

/// Per-frame center errors (px), scale-normalized errors and IoUs.
/// Normalization divides by sqrt(gt area).
pub fn eval_sequence(results: &[BBox], gt: &[BBox]) -> Result<Vec<FrameEval>> {
    if results.len() != gt.len() {
        return Err(ModelError::Input(format!(
            "result/ground-truth length mismatch: {} vs {}",
            results.len(),
            gt.len()
        )));
    }
    Ok(results
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            let center_err = r.center_distance(g);
            let scale = (g.w * g.h).sqrt().max(1e-9);
            FrameEval {
                center_err,
                norm_err: center_err / scale,
                iou: iou(r, g),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    /// Fraction of frames with center error <= 20 px.
    pub precision: f64,
    /// AUC of the normalized-center-error curve over [0, 0.5].
    pub norm_precision: f64,
    /// AUC of the IoU success curve over [0, 1].
    pub success: f64,
    pub frames: usize,
    pub fps: Option<f64>,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "PR {:.3}  NPR {:.3}  SR {:.3}  ({} frames{})",
            self.precision,
            self.norm_precision,
            self.success,
            self.frames,
            self.fps.map(|v| format!(", {v:.1} fps")).unwrap_or_default()
        )
    }
}

/// Frame-pooled metrics over any frame collection; `None` when empty (an
/// absent attribute is reported as absent, not zero).
pub fn aggregate<'a>(evals: impl IntoIterator<Item = &'a FrameEval>) -> Option<MetricsReport> {
    let evals: Vec<&FrameEval> = evals.into_iter().collect();
    if evals.is_empty() {
        return None;
    }
    let n = evals.len() as f64;
    let precision = evals
        .iter()
        .filter(|e| e.center_err <= PRECISION_THRESHOLD_PX)
        .count() as f64
        / n;
    let norm_precision = auc(&thresholds(NORM_PRECISION_MAX), |t| {
        evals.iter().filter(|e| e.norm_err <= t).count() as f64 / n
    });
    let success = auc(&thresholds(1.0), |t| {
        evals.iter().filter(|e| e.iou >= t).count() as f64 / n
    });
    Some(MetricsReport {
        precision,
        norm_precision,
        success,
        frames: evals.len(),
        fps: None,
    })
}

fn thresholds(max: f64) -> Vec<f64> {
    (0..CURVE_POINTS)
        .map(|i| max * i as f64 / (CURVE_POINTS - 1) as f64)
        .collect()
}

fn auc(grid: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    grid.iter().map(|&t| f(t)).sum::<f64>() / grid.len() as f64
}

/// (threshold, success-rate) pairs for the success plot.
pub fn success_curve(evals: &[FrameEval]) -> Vec<(f64, f64)> {
    let n = evals.len().max(1) as f64;
    thresholds(1.0)
        .into_iter()
        .map(|t| (t, evals.iter().filter(|e| e.iou >= t).count() as f64 / n))
        .collect()
}

/// (threshold-px, precision) pairs for the precision plot, up to 50 px.
pub fn precision_curve(evals: &[FrameEval]) -> Vec<(f64, f64)> {
    let n = evals.len().max(1) as f64;
    (0..CURVE_POINTS)
        .map(|i| {
            let t = 50.0 * i as f64 / (CURVE_POINTS - 1) as f64;
            (t, evals.iter().filter(|e| e.center_err <= t).count() as f64 / n)
        })
        .collect()
}

/// Parse a sidecar confidence file: one float per line.
pub fn parse_confidences(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|e| format!("line {}: {}", i + 1, e))?;
            if !v.is_finite() {
                return Err(format!("line {}: non-finite confidence", i + 1));
            }
            Ok(v)
        })
        .collect()
}

/// Render a metrics report as line-delimited key=value text.
pub fn render_kv(report: &MetricsReport, prefix: &str) -> String {
    let mut out = format!(
        "{prefix}precision={:.6}\n{prefix}norm_precision={:.6}\n{prefix}success={:.6}\n{prefix}frames={}\n",
        report.precision, report.norm_precision, report.success, report.frames
    );
    if let Some(fps) = report.fps {
        out.push_str(&format!("{prefix}fps={fps:.3}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px_box(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_xywh(x, y, w, h)
    }

    #[test]
    fn perfect_results_score_one() {
        let gt = vec![px_box(10.0, 10.0, 20.0, 20.0); 5];
        let evals = eval_sequence(&gt, &gt).unwrap();
        let m = aggregate(&evals).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.norm_precision, 1.0);
        assert_eq!(m.success, 1.0);
    }

    #[test]
    fn precision_threshold_semantics() {
        // centers 5 px and 25 px off: PR@20 = 0.5
        let gt = vec![px_box(0.0, 0.0, 10.0, 10.0); 2];
        let results = vec![px_box(5.0, 0.0, 10.0, 10.0), px_box(25.0, 0.0, 10.0, 10.0)];
        let evals = eval_sequence(&results, &gt).unwrap();
        assert_eq!(evals[0].center_err, 5.0);
        assert_eq!(evals[1].center_err, 25.0);
        let m = aggregate(&evals).unwrap();
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn iou_extremes() {
        let a = px_box(0.0, 0.0, 10.0, 10.0);
        let b = px_box(100.0, 100.0, 10.0, 10.0);
        let evals = eval_sequence(&[a, b], &[a, a]).unwrap();
        assert_eq!(evals[0].iou, 1.0);
        assert_eq!(evals[1].iou, 0.0);
    }

    #[test]
    fn hand_computed_five_frame_fixture() {
        // gt: unit 20x20 boxes at the origin; results shift progressively
        let gt = vec![px_box(0.0, 0.0, 20.0, 20.0); 5];
        let results = vec![
            px_box(0.0, 0.0, 20.0, 20.0),  // err 0,   iou 1
            px_box(10.0, 0.0, 20.0, 20.0), // err 10,  iou 10*20/(2*400-200)=1/3
            px_box(30.0, 0.0, 20.0, 20.0), // err 30,  iou 0
            px_box(0.0, 15.0, 20.0, 20.0), // err 15,  iou 5*20/(800-100)=1/7
            px_box(40.0, 40.0, 20.0, 20.0),// err ~56.6, iou 0
        ];
        let evals = eval_sequence(&results, &gt).unwrap();
        let m = aggregate(&evals).unwrap();
        // PR@20: errors {0, 10, 30, 15, 56.6} -> 3/5
        assert!((m.precision - 0.6).abs() < 1e-12);
        // NPR: norm errors = err / 20 -> {0, .5, 1.5, .75, 2.83}; thresholds
        // 0..0.5 in 51 steps: frame 1 passes everywhere (51), frame 2 passes
        // only at the last point (1), others never.
        let expected_npr = (51.0 + 1.0) / (51.0 * 5.0);
        assert!((m.norm_precision - expected_npr).abs() < 1e-12, "npr {}", m.norm_precision);
        // SR: ious {1, 1/3, 0, 1/7, 0}; count of grid points <= iou, over 51
        let expected_sr = |ious: &[f64]| {
            let mut total = 0.0;
            for i in 0..51 {
                let t = i as f64 / 50.0;
                total += ious.iter().filter(|&&v| v >= t).count() as f64 / 5.0;
            }
            total / 51.0
        };
        let sr = expected_sr(&[1.0, 1.0 / 3.0, 0.0, 1.0 / 7.0, 0.0]);
        assert!((m.success - sr).abs() < 1e-12);
    }

    #[test]
    fn success_auc_invariant_to_frame_order() {
        let gt: Vec<BBox> = (0..10).map(|i| px_box(i as f64, 0.0, 10.0, 10.0)).collect();
        let results: Vec<BBox> = (0..10)
            .map(|i| px_box(i as f64 + (i % 3) as f64, 0.0, 10.0, 10.0))
            .collect();
        let evals = eval_sequence(&results, &gt).unwrap();
        let m1 = aggregate(&evals).unwrap();
        let mut reversed = evals.clone();
        reversed.reverse();
        let m2 = aggregate(&reversed).unwrap();
        assert_eq!(m1.success, m2.success);
        assert_eq!(m1.precision, m2.precision);
    }

    #[test]
    fn pooling_two_sequences() {
        let gt = vec![px_box(0.0, 0.0, 10.0, 10.0); 4];
        let good = eval_sequence(&gt, &gt).unwrap();
        let bad: Vec<FrameEval> = eval_sequence(
            &[px_box(500.0, 500.0, 10.0, 10.0); 4],
            &gt,
        )
        .unwrap();
        let pooled: Vec<FrameEval> = good.iter().chain(bad.iter()).copied().collect();
        let m = aggregate(&pooled).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.frames, 8);
    }

    #[test]
    fn empty_selection_is_absent() {
        assert!(aggregate([].iter()).is_none());
    }

    #[test]
    fn length_mismatch_is_input_error() {
        let gt = vec![px_box(0.0, 0.0, 1.0, 1.0); 3];
        assert!(eval_sequence(&gt[..2], &gt).is_err());
    }

    #[test]
    fn confidence_parsing() {
        assert_eq!(parse_confidences("0.5\n0.25\n").unwrap(), vec![0.5, 0.25]);
        assert!(parse_confidences("0.5\nnan\n").is_err());
        assert!(parse_confidences("0.5\nx\n").is_err());
    }
}
