//! Prompt-tuning loop: triplet sampling from sequence datasets, decoupled
//! weight-decay Adam over the trainable parameters only, and the staged
//! learning-rate schedule.

use tempotrack_tensor::{Graph, ParamStore, Rng, Scalar, Tensor};

use crate::boxes::BBox;
use crate::crops::{crop_pair, CropSpec, CropWindow};
use crate::dataset::LoadedSequence;
use crate::error::{ModelError, Result};
use crate::losses::{total_loss, LossWeights};
use crate::model::{FramePair, ModelConfig, TrackModel, VariantConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Max frame gap between the online-template surrogate and the search
    /// frame, mirroring the inference update interval.
    pub max_frame_gap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            samples_per_epoch: 512,
            batch_size: 16,
            lr: 1e-4,
            lr_drop_epoch: 10,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            max_frame_gap: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("training sizes must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs && self.epochs > 1 {
            return Err(ModelError::Config(format!(
                "lr_drop_epoch ({}) must be < epochs ({})",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.lr <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(ModelError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Staged schedule: base rate, dropped once after `lr_drop_epoch` epochs
    /// (epoch argument is 1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Adam with decoupled weight decay. Frozen parameters are never touched.
pub struct AdamW<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(&p.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(&p.shape())).collect();
        AdamW { m, v, t: 0 }
    }

    /// One update over every trainable parameter. Gradients are first
    /// globally norm-clipped; non-finite gradients abort the step.
    pub fn step(&mut self, store: &ParamStore<F>, lr: f64, weight_decay: f64, grad_clip: f64) -> Result<()> {
        let mut sq_norm = 0.0f64;
        for (name, p) in store.iter() {
            if !p.trainable() {
                continue;
            }
            for g in p.borrow().grad.data() {
                let g = g.to_f64();
                if !g.is_finite() {
                    return Err(ModelError::Train(format!("non-finite gradient in '{name}'")));
                }
                sq_norm += g * g;
            }
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if grad_clip > 0.0 && norm > grad_clip {
            grad_clip / norm
        } else {
            1.0
        };

        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (idx, (_, p)) in store.iter().enumerate() {
            if !p.trainable() {
                continue;
            }
            let mut param = p.borrow_mut();
            let n = param.value.numel();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let grad = param.grad.clone();
            let value = param.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i].to_f64() * clip_scale;
                let mi = ADAM_BETA1 * m[i].to_f64() + (1.0 - ADAM_BETA1) * g;
                let vi = ADAM_BETA2 * v[i].to_f64() + (1.0 - ADAM_BETA2) * g * g;
                m[i] = F::from_f64(mi);
                v[i] = F::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                let decayed = value[i].to_f64() * (1.0 - lr * weight_decay);
                value[i] = F::from_f64(decayed - lr * update);
            }
        }
        Ok(())
    }
}

/// One training example: template/surrogate/search crops plus the box in
/// normalized search coordinates.
pub struct SamplePair<F: Scalar> {
    pub init_template: FramePair<F>,
    pub online_template: FramePair<F>,
    pub search: FramePair<F>,
    pub gt_in_search: BBox,
    /// True when the jittered window clipped the ground-truth box.
    pub clipped: bool,
    /// Source frame indices (initial, surrogate, search).
    pub frames: (usize, usize, usize),
}

pub struct Sampler {
    crop: CropSpec,
    template_side: usize,
    search_side: usize,
    max_frame_gap: usize,
    center_jitter: f64,
    scale_jitter: f64,
}

impl Sampler {
    pub fn new(model_cfg: &ModelConfig, max_frame_gap: usize) -> Self {
        // the scale jitter must cover the window-size excursions seen when
        // tracking feeds its own size estimates back into the crop, so that
        // off-nominal crops regress toward the truth instead of drifting
        Sampler {
            crop: CropSpec::default(),
            template_side: model_cfg.backbone.template_side,
            search_side: model_cfg.backbone.search_side,
            max_frame_gap,
            center_jitter: 0.15,
            scale_jitter: 0.35,
        }
    }

    /// Draw a triplet: initial template from an early frame, online-template
    /// surrogate from a middle frame, search from a later frame within the
    /// frame-gap budget, with center/scale jitter on the search window.
    pub fn sample<F: Scalar>(&self, dataset: &[LoadedSequence], rng: &mut Rng) -> Result<SamplePair<F>> {
        let usable: Vec<&LoadedSequence> = dataset.iter().filter(|s| s.len() >= 3).collect();
        if usable.is_empty() {
            return Err(ModelError::Input("no sequence with at least 3 frames".into()));
        }
        let seq = usable[rng.below(usable.len())];
        let n = seq.len();
        let ts = 2 + rng.below(n - 2);
        let tm_lo = ts.saturating_sub(self.max_frame_gap).max(1);
        let tm = tm_lo + rng.below(ts - tm_lo + 1);
        // the initial template comes from the opening stretch, like the
        // first-frame template at inference; when the target has morphed by
        // frame ts, only the surrogate template is fresh
        let early = (n / 5).max(1).min(tm);
        let t0 = rng.below(early);

        let template = |t: usize, side: usize, factor: f64| -> Result<FramePair<F>> {
            let window = CropWindow::around(&seq.meta.boxes[t], factor)?;
            let (rgb, tir) = crop_pair(&seq.frames[t].0, &seq.frames[t].1, &window, side)?;
            Ok(FramePair::new(rgb.tensor, tir.tensor))
        };
        let init_template = template(t0, self.template_side, self.crop.area_factor_template)?;
        let online_template = template(tm, self.template_side, self.crop.area_factor_template)?;

        let gt = seq.meta.boxes[ts];
        let mut window = CropWindow::around(&gt, self.crop.area_factor_search)?;
        window.cx += rng.uniform_in(-self.center_jitter, self.center_jitter) * window.side;
        window.cy += rng.uniform_in(-self.center_jitter, self.center_jitter) * window.side;
        window.side *= (rng.uniform_in(-self.scale_jitter, self.scale_jitter)).exp();
        let (rgb, tir) = crop_pair(&seq.frames[ts].0, &seq.frames[ts].1, &window, self.search_side)?;

        let mut gt_in_search = window.from_image(&gt);
        let mut clipped = false;
        // keep the regression target inside the crop
        if gt_in_search.left() < 0.0
            || gt_in_search.top() < 0.0
            || gt_in_search.right() > 1.0
            || gt_in_search.bottom() > 1.0
        {
            clipped = true;
            let l = gt_in_search.left().max(0.0);
            let t = gt_in_search.top().max(0.0);
            let r = gt_in_search.right().min(1.0);
            let b = gt_in_search.bottom().min(1.0);
            gt_in_search = BBox::new(
                ((l + r) / 2.0).clamp(1e-3, 1.0 - 1e-3),
                ((t + b) / 2.0).clamp(1e-3, 1.0 - 1e-3),
                (r - l).max(1e-3),
                (b - t).max(1e-3),
            );
        }
        Ok(SamplePair {
            init_template,
            online_template,
            search: FramePair::new(rgb.tensor, tir.tensor),
            gt_in_search,
            clipped,
            frames: (t0, tm, ts),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub lr: f64,
}

impl std::fmt::Display for TrainLogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} step={} loss={:.5} cls={:.5} iou={:.5} l1={:.5} lr={:.2e}",
            self.epoch, self.step, self.loss, self.cls, self.iou, self.l1, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Run the optimization loop over whatever is trainable in the model.
pub fn train<F: Scalar>(
    model: &TrackModel<F>,
    dataset: &[LoadedSequence],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = Sampler::new(&model.cfg, cfg.max_frame_gap);
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamW::new(&model.params);
    let weights = LossWeights::default();
    let steps_per_epoch = (cfg.samples_per_epoch / cfg.batch_size).max(1);

    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            let mut batch_cls = 0.0;
            let mut batch_iou = 0.0;
            let mut batch_l1 = 0.0;
            for _ in 0..cfg.batch_size {
                let sample = sampler.sample::<F>(dataset, &mut rng)?;
                let mut g = Graph::new();
                let maps = model.forward(
                    &mut g,
                    &sample.init_template,
                    &sample.online_template,
                    &sample.search,
                    true,
                )?;
                let loss = total_loss(&mut g, &maps, &sample.gt_in_search, &weights)?;
                let scaled = g.scale(loss.total, F::from_f64(1.0 / cfg.batch_size as f64))?;
                let value = g.value(scaled).item().to_f64() * cfg.batch_size as f64;
                if !value.is_finite() {
                    return Err(ModelError::Train(format!(
                        "loss diverged (seed {}, epoch {epoch}, step {step})",
                        cfg.seed
                    )));
                }
                g.backward(scaled)?;
                batch_loss += value / cfg.batch_size as f64;
                batch_cls += loss.cls / cfg.batch_size as f64;
                batch_iou += loss.iou / cfg.batch_size as f64;
                batch_l1 += loss.l1 / cfg.batch_size as f64;
            }
            adam.step(&model.params, lr, cfg.weight_decay, cfg.grad_clip)?;
            epoch_loss += batch_loss / steps_per_epoch as f64;
            let entry = TrainLogEntry {
                epoch,
                step,
                loss: batch_loss,
                cls: batch_cls,
                iou: batch_iou,
                l1: batch_l1,
                lr,
            };
            on_log(&entry);
            log.push(entry);
            final_loss = batch_loss;
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        log,
        epoch_losses,
        final_loss,
    })
}

/// Train a single-branch RGB tracker (backbone + head) from scratch; this
/// checkpoint seeds the frozen portions of every later variant.
pub fn pretrain_base<F: Scalar>(
    model_cfg: ModelConfig,
    dataset: &[LoadedSequence],
    cfg: &TrainConfig,
    model_seed: u64,
    on_log: impl FnMut(&TrainLogEntry),
) -> Result<(TrackModel<F>, TrainOutcome)> {
    if model_cfg.variant != VariantConfig::rgb_baseline() {
        return Err(ModelError::Config("pretraining expects the RGB baseline variant".into()));
    }
    let model = TrackModel::new(model_cfg, model_seed)?;
    let outcome = train(&model, dataset, cfg, on_log)?;
    Ok((model, outcome))
}

/// Build a variant on top of a pretrained base checkpoint and optimize only
/// the parameters that are new relative to the base (prompts, interaction,
/// fusion). Returns the model with the base portion frozen.
pub fn finetune<F: Scalar>(
    model_cfg: ModelConfig,
    base_checkpoint: &std::path::Path,
    dataset: &[LoadedSequence],
    cfg: &TrainConfig,
    model_seed: u64,
    on_log: impl FnMut(&TrainLogEntry),
) -> Result<(TrackModel<F>, TrainOutcome)> {
    let model = TrackModel::new(model_cfg, model_seed)?;
    let loaded = crate::checkpoint::load_base(&model.params, base_checkpoint)?;
    for name in &loaded {
        if !TrackModel::<F>::is_base_param(name) {
            return Err(ModelError::Load {
                path: base_checkpoint.display().to_string(),
                reason: format!("base checkpoint contains non-base parameter '{name}'"),
            });
        }
    }
    let outcome = train(&model, dataset, cfg, on_log)?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_once() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 1e-4);
        assert_eq!(cfg.lr_at_epoch(10), 1e-4);
        assert!((cfg.lr_at_epoch(11) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(25) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap(), true);
        let mut adam = AdamW::new(&store);
        adam.step(&store, 1e-3, 0.0, 0.0).unwrap();
        assert_eq!(p.value().data(), &[0.5, -0.25]);
    }

    #[test]
    fn frozen_param_bitwise_identical_after_100_steps() {
        let mut store = ParamStore::<f32>::new();
        let frozen = store.register("frozen", Tensor::new(vec![2], vec![0.7, -1.3]).unwrap(), false);
        let live = store.register("live", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap(), true);
        let before: Vec<u32> = frozen.value().data().iter().map(|v| v.to_bits()).collect();
        let mut adam = AdamW::new(&store);
        for _ in 0..100 {
            // fake gradients on both
            frozen.accumulate_grad(&Tensor::full(&[2], 1.0)).unwrap();
            live.accumulate_grad(&Tensor::full(&[2], 1.0)).unwrap();
            adam.step(&store, 1e-2, 1e-2, 0.0).unwrap();
            store.zero_grads();
        }
        let after: Vec<u32> = frozen.value().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(live.value().data(), &[0.1, 0.2]);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (w - 3)^2
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::scalar(0.0), true);
        let mut adam = AdamW::new(&store);
        for _ in 0..500 {
            store.zero_grads();
            let mut g = Graph::new();
            let x = g.param(&w);
            let c = g.constant(Tensor::scalar(3.0));
            let d = g.sub(x, c).unwrap();
            let loss = g.mul(d, d).unwrap();
            g.backward(loss).unwrap();
            adam.step(&store, 0.05, 0.0, 0.0).unwrap();
        }
        assert!((w.value().item() - 3.0).abs() < 1e-3, "w = {}", w.value().item());
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("w", Tensor::scalar(1.0), true);
        p.accumulate_grad(&Tensor::scalar(f64::NAN)).unwrap();
        let mut adam = AdamW::new(&store);
        assert!(adam.step(&store, 1e-3, 0.0, 0.0).is_err());
    }

    #[test]
    fn grad_clip_bounds_update_norm() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("w", Tensor::scalar(0.0), true);
        p.accumulate_grad(&Tensor::scalar(1000.0)).unwrap();
        let mut adam = AdamW::new(&store);
        adam.step(&store, 1.0, 0.0, 0.1).unwrap();
        // clipped g = 0.1; adam normalizes to ~1 regardless, but the moment
        // buffers must see the clipped gradient
        let m_after = adam.m[0].item();
        assert!((m_after - 0.1 * (1.0 - ADAM_BETA1)).abs() < 1e-12);
    }
}
