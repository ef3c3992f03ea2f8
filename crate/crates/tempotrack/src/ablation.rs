//! Component-ablation harness: trains the variant family off one shared
//! pretrained base, evaluates each over a test set, and renders the
//! component table plus the insertion-layer sweep.

use std::path::Path;

use tempotrack_tensor::Scalar;

use crate::dataset::{self, LoadedSequence};
use crate::error::Result;
use crate::metrics::{self, FrameEval, MetricsReport};
use crate::model::{ModelConfig, TrackModel, VariantConfig};
use crate::runtime::{track_sequence, RuntimeConfig};
use crate::trainer::{self, TrainConfig};

/// Identifier of one row in the component table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Single-branch RGB tracker (pretrained base as-is).
    RgbBaseline,
    /// Single branch + thermal prompts.
    PromptBaseline,
    /// Full architecture, online template replaced every frame.
    PerFrameUpdate,
    /// Dual branch + prompts + interval selection, no template interaction.
    NoSti,
    /// The complete architecture.
    Full,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::RgbBaseline => "baseline-rgb",
            Variant::PromptBaseline => "+prompts",
            Variant::PerFrameUpdate => "per-frame-update",
            Variant::NoSti => "no-interaction",
            Variant::Full => "full",
        }
    }

    /// Checkmark columns: (prompts, interaction, interval-selection).
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::RgbBaseline => (false, false, false),
            Variant::PromptBaseline => (true, false, false),
            Variant::PerFrameUpdate => (true, true, false),
            Variant::NoSti => (true, false, true),
            Variant::Full => (true, true, true),
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::RgbBaseline,
            Variant::PromptBaseline,
            Variant::PerFrameUpdate,
            Variant::NoSti,
            Variant::Full,
        ]
    }

    /// Model structure for this variant.
    pub fn model_variant(self, sti_layers: &[usize]) -> VariantConfig {
        match self {
            Variant::RgbBaseline => VariantConfig::rgb_baseline(),
            Variant::PromptBaseline => VariantConfig::prompt_baseline(),
            Variant::NoSti => VariantConfig::dual_no_sti(),
            Variant::PerFrameUpdate | Variant::Full => VariantConfig::full(sti_layers.to_vec()),
        }
    }

    /// Inference update interval for this variant (against the default).
    pub fn update_interval(self, default_interval: usize) -> Option<usize> {
        match self {
            Variant::RgbBaseline | Variant::PromptBaseline => None,
            Variant::PerFrameUpdate => Some(1),
            Variant::NoSti | Variant::Full => Some(default_interval),
        }
    }

    /// Which training product this variant reuses: the per-frame-update row
    /// shares the full model's weights (it differs only in inference policy).
    pub fn checkpoint_key(self) -> &'static str {
        match self {
            Variant::RgbBaseline => "base",
            Variant::PromptBaseline => "prompt",
            Variant::NoSti => "no_sti",
            Variant::PerFrameUpdate | Variant::Full => "full",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub mcp: bool,
    pub sti: bool,
    pub ots: bool,
    pub report: Option<MetricsReport>,
}

pub struct AblationTable(pub Vec<AblationRow>);

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = |b: bool| if b { "x" } else { " " };
        writeln!(f, "{:<18} {:^3} {:^3} {:^3} {:>6} {:>6} {:>7}", "model", "MCP", "STI", "OTS", "PR", "SR", "FPS")?;
        for row in &self.0 {
            match &row.report {
                Some(r) => writeln!(
                    f,
                    "{:<18} {:^3} {:^3} {:^3} {:>6.3} {:>6.3} {:>7}",
                    row.label,
                    mark(row.mcp),
                    mark(row.sti),
                    mark(row.ots),
                    r.precision,
                    r.success,
                    r.fps.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
                )?,
                None => writeln!(
                    f,
                    "{:<18} {:^3} {:^3} {:^3} {:>6} {:>6} {:>7}",
                    row.label,
                    mark(row.mcp),
                    mark(row.sti),
                    mark(row.ots),
                    "absent",
                    "-",
                    "-"
                )?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub layers: Vec<usize>,
    pub report: MetricsReport,
}

pub struct SweepTable(pub Vec<SweepRow>);

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<16} {:>6} {:>6} {:>7}", "layers", "PR", "SR", "FPS")?;
        for row in &self.0 {
            let layers = if row.layers.is_empty() {
                "{}".to_string()
            } else {
                format!(
                    "{{{}}}",
                    row.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
                )
            };
            writeln!(
                f,
                "{:<16} {:>6.3} {:>6.3} {:>7.1}",
                layers,
                row.report.precision,
                row.report.success,
                row.report.fps.unwrap_or(f64::NAN)
            )?;
        }
        Ok(())
    }
}

/// Per-sequence evaluation results for one model over one test set. Frames
/// are streamed and dropped; only metadata and per-frame scores are kept.
pub struct EvalRun {
    pub per_seq: Vec<(crate::dataset::SequenceMeta, Vec<FrameEval>)>,
    pub fps: f64,
}

impl EvalRun {
    pub fn pooled(&self) -> Option<MetricsReport> {
        let all: Vec<&FrameEval> = self.per_seq.iter().flat_map(|(_, e)| e.iter()).collect();
        metrics::aggregate(all).map(|mut m| {
            m.fps = Some(self.fps);
            m
        })
    }

    /// Pool only the frames whose span carries `tag`.
    pub fn pooled_attribute(&self, tag: &str) -> Option<MetricsReport> {
        let selected: Vec<&FrameEval> = self
            .per_seq
            .iter()
            .flat_map(|(meta, evals)| {
                meta.frames_with_attribute(tag)
                    .into_iter()
                    .map(move |f| &evals[f])
            })
            .collect();
        metrics::aggregate(selected)
    }

    /// Pool the frames NOT carrying `tag`.
    pub fn pooled_without_attribute(&self, tag: &str) -> Option<MetricsReport> {
        let selected: Vec<&FrameEval> = self
            .per_seq
            .iter()
            .flat_map(|(meta, evals)| {
                let tagged: std::collections::HashSet<usize> =
                    meta.frames_with_attribute(tag).into_iter().collect();
                (0..evals.len()).filter(move |f| !tagged.contains(f)).map(move |f| &evals[f])
            })
            .collect();
        metrics::aggregate(selected)
    }
}

/// Track every sequence under `test_root` with the model and evaluate.
pub fn evaluate_model<F: Scalar>(
    model: &TrackModel<F>,
    runtime: RuntimeConfig,
    test_root: &Path,
) -> Result<EvalRun> {
    let dirs = dataset::list_sequence_dirs(test_root)?;
    let mut per_seq = Vec::with_capacity(dirs.len());
    let mut total_frames = 0usize;
    let mut total_time = 0.0f64;
    for dir in dirs {
        let seq = LoadedSequence::load(&dir)?;
        let run = track_sequence(model, runtime.clone(), &seq)?;
        let evals = metrics::eval_sequence(&run.boxes, &seq.meta.boxes)?;
        total_frames += seq.len().saturating_sub(1);
        if run.fps.is_finite() && run.fps > 0.0 {
            total_time += (seq.len() - 1) as f64 / run.fps;
        }
        per_seq.push((seq.meta, evals));
    }
    let fps = if total_time > 0.0 {
        total_frames as f64 / total_time
    } else {
        f64::INFINITY
    };
    Ok(EvalRun { per_seq, fps })
}

/// All training products needed by the variant family for one seed.
pub struct SuiteCheckpoints {
    pub base: std::path::PathBuf,
    pub prompt: std::path::PathBuf,
    pub no_sti: Option<std::path::PathBuf>,
    pub full: std::path::PathBuf,
}

/// Pretrain the base once, then fine-tune the prompt/full (and optionally the
/// no-interaction) variants from it. Checkpoints land under `work_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_suite<F: Scalar>(
    backbone: crate::backbone::BackboneConfig,
    sti_layers: &[usize],
    pretrain_data: &[LoadedSequence],
    finetune_data: &[LoadedSequence],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    work_dir: &Path,
    seed: u64,
    include_no_sti: bool,
    mut on_log: impl FnMut(&str, &trainer::TrainLogEntry),
) -> Result<SuiteCheckpoints> {
    std::fs::create_dir_all(work_dir)
        .map_err(|e| crate::error::ModelError::io(work_dir.display().to_string(), e))?;

    let base_dir = work_dir.join(format!("base_s{seed}"));
    let base_cfg = ModelConfig::new(backbone.clone(), VariantConfig::rgb_baseline())?;
    let mut pre_cfg = pretrain_cfg.clone();
    pre_cfg.seed = seed;
    let (base_model, _) = trainer::pretrain_base::<F>(base_cfg, pretrain_data, &pre_cfg, seed, |e| {
        on_log("base", e)
    })?;
    crate::checkpoint::save(&base_model.params, &base_dir)?;

    let mut ft_cfg = finetune_cfg.clone();
    ft_cfg.seed = seed.wrapping_add(1);

    let prompt_dir = work_dir.join(format!("prompt_s{seed}"));
    let prompt_cfg = ModelConfig::new(backbone.clone(), VariantConfig::prompt_baseline())?;
    let (prompt_model, _) =
        trainer::finetune::<F>(prompt_cfg, &base_dir, finetune_data, &ft_cfg, seed + 10, |e| {
            on_log("prompt", e)
        })?;
    crate::checkpoint::save(&prompt_model.params, &prompt_dir)?;

    let no_sti = if include_no_sti {
        let dir = work_dir.join(format!("no_sti_s{seed}"));
        let cfg = ModelConfig::new(backbone.clone(), VariantConfig::dual_no_sti())?;
        let (m, _) = trainer::finetune::<F>(cfg, &base_dir, finetune_data, &ft_cfg, seed + 20, |e| {
            on_log("no_sti", e)
        })?;
        crate::checkpoint::save(&m.params, &dir)?;
        Some(dir)
    } else {
        None
    };

    let full_dir = work_dir.join(format!("full_s{seed}"));
    let full_cfg = ModelConfig::new(backbone.clone(), VariantConfig::full(sti_layers.to_vec()))?;
    let (full_model, _) =
        trainer::finetune::<F>(full_cfg, &base_dir, finetune_data, &ft_cfg, seed + 30, |e| {
            on_log("full", e)
        })?;
    crate::checkpoint::save(&full_model.params, &full_dir)?;

    Ok(SuiteCheckpoints {
        base: base_dir,
        prompt: prompt_dir,
        no_sti,
        full: full_dir,
    })
}

/// Load a variant model from its checkpoint and evaluate it on the test set.
pub fn evaluate_variant<F: Scalar>(
    variant: Variant,
    backbone: &crate::backbone::BackboneConfig,
    sti_layers: &[usize],
    checkpoint: &Path,
    default_interval: usize,
    test_root: &Path,
) -> Result<EvalRun> {
    let cfg = ModelConfig::new(backbone.clone(), variant.model_variant(sti_layers))?;
    let model = TrackModel::<F>::new(cfg, 0)?;
    crate::checkpoint::load(&model.params, checkpoint)?;
    let runtime = RuntimeConfig {
        update_interval: variant.update_interval(default_interval),
        ..RuntimeConfig::default()
    };
    evaluate_model(&model, runtime, test_root)
}
