//! Training objective: weighted focal classification plus L1 and
//! generalized-IoU regression, combined as cls + 2*iou + 5*l1.

use tempotrack_tensor::{Graph, Scalar, Tensor, ValueId};

use crate::boxes::{self, BBox};
use crate::error::{ModelError, Result};
use crate::heads::HeadMaps;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;
const PROB_CLAMP: f64 = 1e-6;

/// Gaussian-splatted classification target. The cell containing the box
/// center is exactly 1; sigma grows with the box footprint.
pub fn gaussian_target_map<F: Scalar>(gt: &BBox, s: usize) -> Result<Tensor<F>> {
    gt.validate()?;
    let ci = ((gt.cy * s as f64).floor() as isize).clamp(0, s as isize - 1) as usize;
    let cj = ((gt.cx * s as f64).floor() as isize).clamp(0, s as isize - 1) as usize;
    let sigma = (s as f64 * gt.w.min(gt.h) / 6.0).max(1.0);
    let mut data = vec![F::ZERO; s * s];
    for i in 0..s {
        for j in 0..s {
            let dy = i as f64 - ci as f64;
            let dx = j as f64 - cj as f64;
            data[i * s + j] = F::from_f64((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    data[ci * s + cj] = F::ONE;
    Ok(Tensor::new(vec![1, s, s], data)?)
}

/// Center cell of a normalized box on an SxS grid.
pub fn center_cell(gt: &BBox, s: usize) -> (usize, usize) {
    let ci = ((gt.cy * s as f64).floor() as isize).clamp(0, s as isize - 1) as usize;
    let cj = ((gt.cx * s as f64).floor() as isize).clamp(0, s as isize - 1) as usize;
    (ci, cj)
}

/// Penalty-reduced focal loss over a Gaussian target map: the single
/// gt == 1 cell is positive, everything else is a down-weighted negative.
/// Normalized by the positive count.
pub fn weighted_focal<F: Scalar>(g: &mut Graph<F>, pred: ValueId, gt: &Tensor<F>) -> Result<ValueId> {
    if g.shape(pred) != gt.shape() {
        return Err(ModelError::Dim(format!(
            "focal loss shape mismatch: {:?} vs {:?}",
            g.shape(pred),
            gt.shape()
        )));
    }
    let n = gt.numel();
    let mut pos_mask = vec![F::ZERO; n];
    let mut neg_weight = vec![F::ZERO; n];
    let mut n_pos = 0usize;
    for (i, &t) in gt.data().iter().enumerate() {
        if t == F::ONE {
            pos_mask[i] = F::ONE;
            n_pos += 1;
        } else {
            let om = 1.0 - t.to_f64();
            neg_weight[i] = F::from_f64(om.powi(FOCAL_BETA));
        }
    }
    if n_pos == 0 {
        return Err(ModelError::Input("focal target has no positive cell".into()));
    }
    let shape = gt.shape().to_vec();
    let pos_mask = g.constant(Tensor::new(shape.clone(), pos_mask)?);
    let neg_weight = g.constant(Tensor::new(shape.clone(), neg_weight)?);

    let p = g.clamp(pred, F::from_f64(PROB_CLAMP), F::from_f64(1.0 - PROB_CLAMP))?;
    let one = g.constant(Tensor::full(&shape, F::ONE));
    let one_minus_p = g.sub(one, p)?;
    let ln_p = g.ln(p)?;
    let ln_omp = g.ln(one_minus_p)?;

    // positives: (1-p)^alpha * ln p
    let omp_sq = g.mul(one_minus_p, one_minus_p)?;
    debug_assert_eq!(FOCAL_ALPHA, 2);
    let pos_term = g.mul(omp_sq, ln_p)?;
    let pos_term = g.mul(pos_term, pos_mask)?;

    // negatives: (1-gt)^beta * p^alpha * ln(1-p)
    let p_sq = g.mul(p, p)?;
    let neg_term = g.mul(p_sq, ln_omp)?;
    let neg_term = g.mul(neg_term, neg_weight)?;

    let total = g.add(pos_term, neg_term)?;
    let summed = g.sum_all(total)?;
    Ok(g.scale(summed, F::from_f64(-1.0 / n_pos as f64))?)
}

/// 1 - GIoU of two boxes, plain-value version used by fixtures and metrics.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(1.0 - boxes::giou(pred, gt))
}

/// Predicted box decoded at a fixed cell, as graph scalars: the regression
/// path of the loss flows through these four values.
pub struct PredBoxAtCell {
    pub cx: ValueId,
    pub cy: ValueId,
    pub w: ValueId,
    pub h: ValueId,
}

/// Read offset/size at the ground-truth center cell and decode to a
/// normalized box on the graph.
pub fn pred_box_at_cell<F: Scalar>(
    g: &mut Graph<F>,
    maps: &HeadMaps,
    cell: (usize, usize),
    s: usize,
) -> Result<PredBoxAtCell> {
    let (ci, cj) = cell;
    let cells = s * s;
    let flat = ci * s + cj;
    let off = g.gather(maps.offset, vec![flat, cells + flat])?;
    let sz = g.gather(maps.size, vec![flat, cells + flat])?;
    let off_x = g.gather(off, vec![0])?;
    let off_y = g.gather(off, vec![1])?;
    let w = g.gather(sz, vec![0])?;
    let h = g.gather(sz, vec![1])?;
    let inv_s = F::from_f64(1.0 / s as f64);
    let jx = g.constant(Tensor::scalar(F::from_f64(cj as f64)));
    let iy = g.constant(Tensor::scalar(F::from_f64(ci as f64)));
    let cx = g.add(off_x, jx)?;
    let cx = g.scale(cx, inv_s)?;
    let cy = g.add(off_y, iy)?;
    let cy = g.scale(cy, inv_s)?;
    Ok(PredBoxAtCell { cx, cy, w, h })
}

/// Differentiable 1 - GIoU against a constant ground-truth box.
pub fn giou_loss_graph<F: Scalar>(g: &mut Graph<F>, pred: &PredBoxAtCell, gt: &BBox) -> Result<ValueId> {
    gt.validate()?;
    let half = F::from_f64(0.5);
    let scalar = |g: &mut Graph<F>, v: f64| g.constant(Tensor::scalar(F::from_f64(v)));

    let half_w = g.scale(pred.w, half)?;
    let half_h = g.scale(pred.h, half)?;
    let p_l = g.sub(pred.cx, half_w)?;
    let p_r = g.add(pred.cx, half_w)?;
    let p_t = g.sub(pred.cy, half_h)?;
    let p_b = g.add(pred.cy, half_h)?;

    let g_l = scalar(g, gt.left());
    let g_r = scalar(g, gt.right());
    let g_t = scalar(g, gt.top());
    let g_b = scalar(g, gt.bottom());

    // intersection
    let ix = {
        let lo = g.max_elem(p_l, g_l)?;
        let hi = g.min_elem(p_r, g_r)?;
        let w = g.sub(hi, lo)?;
        g.relu(w)?
    };
    let iy = {
        let lo = g.max_elem(p_t, g_t)?;
        let hi = g.min_elem(p_b, g_b)?;
        let h = g.sub(hi, lo)?;
        g.relu(h)?
    };
    let inter = g.mul(ix, iy)?;

    let p_area = g.mul(pred.w, pred.h)?;
    let gt_area = scalar(g, gt.area());
    let sum_areas = g.add(p_area, gt_area)?;
    let union = g.sub(sum_areas, inter)?;

    // enclosing hull
    let hull_w = {
        let lo = g.min_elem(p_l, g_l)?;
        let hi = g.max_elem(p_r, g_r)?;
        g.sub(hi, lo)?
    };
    let hull_h = {
        let lo = g.min_elem(p_t, g_t)?;
        let hi = g.max_elem(p_b, g_b)?;
        g.sub(hi, lo)?
    };
    let hull = g.mul(hull_w, hull_h)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap_ratio = g.div(gap, hull)?;
    let giou = g.sub(iou, gap_ratio)?;
    let one = scalar(g, 1.0);
    Ok(g.sub(one, giou)?)
}

/// Mean absolute difference over (cx, cy, w, h).
pub fn l1_loss_graph<F: Scalar>(g: &mut Graph<F>, pred: &PredBoxAtCell, gt: &BBox) -> Result<ValueId> {
    let scalar = |g: &mut Graph<F>, v: f64| g.constant(Tensor::scalar(F::from_f64(v)));
    let mut acc: Option<ValueId> = None;
    for (p, t) in [
        (pred.cx, gt.cx),
        (pred.cy, gt.cy),
        (pred.w, gt.w),
        (pred.h, gt.h),
    ] {
        let tv = scalar(g, t);
        let d = g.sub(p, tv)?;
        let a = g.abs(d)?;
        acc = Some(match acc {
            None => a,
            Some(prev) => g.add(prev, a)?,
        });
    }
    Ok(g.scale(acc.expect("4 terms"), F::from_f64(0.25))?)
}

/// Loss value plus per-component readouts for logging.
pub struct TotalLoss {
    pub total: ValueId,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

/// Classification + weighted regression, with the regression terms evaluated
/// at the ground-truth center cell.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    maps: &HeadMaps,
    gt_box: &BBox,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let s = g.shape(maps.score)[1];
    let target = gaussian_target_map::<F>(gt_box, s)?;
    let cls = weighted_focal(g, maps.score, &target)?;

    let cell = center_cell(gt_box, s);
    let pred = pred_box_at_cell(g, maps, cell, s)?;
    let iou = giou_loss_graph(g, &pred, gt_box)?;
    let l1 = l1_loss_graph(g, &pred, gt_box)?;

    let iou_w = g.scale(iou, F::from_f64(weights.lambda_iou))?;
    let l1_w = g.scale(l1, F::from_f64(weights.lambda_l1))?;
    let total = g.add(cls, iou_w)?;
    let total = g.add(total, l1_w)?;
    Ok(TotalLoss {
        total,
        cls: g.value(cls).item().to_f64(),
        iou: g.value(iou).item().to_f64(),
        l1: g.value(l1).item().to_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempotrack_tensor::{gradcheck, GradCheckConfig, ParamStore, Rng};

    #[test]
    fn gaussian_center_cell_is_one() {
        let gt = BBox::new(0.5, 0.5, 0.3, 0.3);
        let map = gaussian_target_map::<f64>(&gt, 8).unwrap();
        let (ci, cj) = center_cell(&gt, 8);
        assert_eq!(map.data()[ci * 8 + cj], 1.0);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gaussian_symmetric_for_centered_box() {
        // grid must be odd-ish around the center cell for exact reflection:
        // cx = cy = 0.5 on a 9-cell grid lands in the middle cell (4, 4)
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4);
        let s = 9;
        let map = gaussian_target_map::<f64>(&gt, s).unwrap();
        for i in 0..s {
            for j in 0..s {
                let mirrored = map.data()[(s - 1 - i) * s + (s - 1 - j)];
                assert!((map.data()[i * s + j] - mirrored).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_mass_grows_with_box_size() {
        let s = 16;
        let small = gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.25, 0.25), s).unwrap();
        let large = gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.9, 0.9), s).unwrap();
        let sum = |t: &Tensor<f64>| t.data().iter().sum::<f64>();
        assert!(sum(&large) > sum(&small));
    }

    #[test]
    fn gaussian_rejects_degenerate_boxes() {
        assert!(gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.0, 0.1), 8).is_err());
        assert!(gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.1, -0.2), 8).is_err());
    }

    #[test]
    fn focal_near_zero_for_confident_correct_prediction() {
        let gt = gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.2, 0.2), 4).unwrap();
        // predict the target map but razor-sharp: 1-1e-6 at the center, ~0 elsewhere
        let pred_data: Vec<f64> = gt
            .data()
            .iter()
            .map(|&t| if t == 1.0 { 1.0 - 1e-6 } else { 1e-6 })
            .collect();
        let mut g = Graph::new();
        let pred = g.constant(Tensor::new(vec![1, 4, 4], pred_data).unwrap());
        let loss = weighted_focal(&mut g, pred, &gt).unwrap();
        assert!(g.value(loss).item() < 1e-4, "loss = {}", g.value(loss).item());
    }

    #[test]
    fn focal_positive_for_uniform_prediction() {
        let gt = gaussian_target_map::<f64>(&BBox::new(0.5, 0.5, 0.2, 0.2), 4).unwrap();
        let mut g = Graph::new();
        let pred = g.constant(Tensor::full(&[1, 4, 4], 0.5));
        let loss = weighted_focal(&mut g, pred, &gt).unwrap();
        assert!(g.value(loss).item() > 0.1);
    }

    #[test]
    fn focal_gradcheck() {
        let gt = gaussian_target_map::<f64>(&BBox::new(0.6, 0.4, 0.3, 0.25), 4).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let logits = store.register("logits", rng.normal_tensor(&[1, 4, 4], 1.0), true);
        let report = gradcheck(
            &store,
            |g| {
                let x = g.param(&logits);
                let p = g.sigmoid(x)?;
                weighted_focal(g, p, &gt).map_err(|e| tempotrack_tensor::TensorError::usage(e.to_string()))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn giou_loss_fixtures() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);

        let disjoint = BBox::new(2.5, 2.5, 1.0, 1.0);
        let loss = giou_loss(&a, &disjoint).unwrap();
        assert!((loss - (1.0 + 7.0 / 9.0)).abs() < 1e-6, "loss = {loss}");

        let nested = BBox::new(0.5, 0.5, 0.5, 0.5);
        assert!((giou_loss(&a, &nested).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn giou_graph_matches_plain_value() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let pred = BBox::new(
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.05, 0.6),
                rng.uniform_in(0.05, 0.6),
            );
            let gt = BBox::new(
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.05, 0.6),
                rng.uniform_in(0.05, 0.6),
            );
            let mut g = Graph::<f64>::new();
            let p = PredBoxAtCell {
                cx: g.constant(Tensor::scalar(pred.cx)),
                cy: g.constant(Tensor::scalar(pred.cy)),
                w: g.constant(Tensor::scalar(pred.w)),
                h: g.constant(Tensor::scalar(pred.h)),
            };
            let graph_loss = giou_loss_graph(&mut g, &p, &gt).unwrap();
            let plain = giou_loss(&pred, &gt).unwrap();
            assert!((g.value(graph_loss).item() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_graph_gradcheck() {
        let gt = BBox::new(0.45, 0.55, 0.3, 0.2);
        let mut store = ParamStore::<f64>::new();
        let raw = store.register(
            "raw",
            Tensor::new(vec![4], vec![0.3, 0.6, -0.4, -0.1]).unwrap(),
            true,
        );
        let report = gradcheck(
            &store,
            |g| {
                let x = g.param(&raw);
                let s = g.sigmoid(x)?; // keep box coords in (0,1)
                let pred = PredBoxAtCell {
                    cx: g.gather(s, vec![0])?,
                    cy: g.gather(s, vec![1])?,
                    w: g.gather(s, vec![2])?,
                    h: g.gather(s, vec![3])?,
                };
                giou_loss_graph(g, &pred, &gt).map_err(|e| tempotrack_tensor::TensorError::usage(e.to_string()))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn total_loss_weighting_arithmetic() {
        // cls 0.1, iou 0.2, l1 0.04 -> 0.1 + 2*0.2 + 5*0.04 = 0.7
        let w = LossWeights::default();
        assert_eq!(w.lambda_iou, 2.0);
        assert_eq!(w.lambda_l1, 5.0);
        let total = 0.1 + w.lambda_iou * 0.2 + w.lambda_l1 * 0.04;
        assert!((total - 0.7).abs() < 1e-12);
    }

    #[test]
    fn doubling_lambdas_doubles_weighted_part_only() {
        let (cls, iou, l1) = (0.3, 0.15, 0.02);
        let base = LossWeights::default();
        let doubled = LossWeights {
            lambda_iou: base.lambda_iou * 2.0,
            lambda_l1: base.lambda_l1 * 2.0,
        };
        let t1 = cls + base.lambda_iou * iou + base.lambda_l1 * l1;
        let t2 = cls + doubled.lambda_iou * iou + doubled.lambda_l1 * l1;
        assert!((t2 - t1 - (base.lambda_iou * iou + base.lambda_l1 * l1)).abs() < 1e-12);
    }
}
