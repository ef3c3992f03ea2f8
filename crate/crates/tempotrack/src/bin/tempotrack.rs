//! Command-line front end: dataset generation, the two training stages,
//! per-sequence tracking, metric evaluation, the ablation harness and
//! gradient checking.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tempotrack::ablation::{self, AblationRow, AblationTable, SweepRow, SweepTable, Variant};
use tempotrack::backbone::BackboneConfig;
use tempotrack::boxes::BBox;
use tempotrack::checkpoint::{self, parse_manifest};
use tempotrack::config::RunConfig;
use tempotrack::dataset::{self, LoadedSequence, ATTRIBUTE_CODES};
use tempotrack::imageio::{draw_box, render_curve};
use tempotrack::losses::total_loss;
use tempotrack::metrics;
use tempotrack::model::{FramePair, ModelConfig, TrackModel, VariantConfig};
use tempotrack::runtime::{track_sequence, write_confidences, write_results, RuntimeConfig};
use tempotrack::synth::{self, EventKind, EventSpan, SynthConfig};
use tempotrack::trainer::{self};
use tempotrack::{ModelError, Result};
use tempotrack_tensor::{gradcheck, Graph, GradCheckConfig, Rng};

#[derive(Parser)]
#[command(name = "tempotrack", version, about = "Temporal-adaptive RGB-T tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared configuration plumbing: file first, then repeatable overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set token_dim=32 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Online-template update interval: an integer or "never".
    #[arg(long)]
    update_interval: Option<String>,
    /// Comma-separated 1-indexed encoder layers, or "none".
    #[arg(long)]
    sti_layers: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(ModelError::Config(format!("--set expects KEY=VALUE, got '{kv}'")));
            };
            overrides.push((k.trim().into(), v.trim().into()));
        }
        if let Some(v) = self.seed {
            overrides.push(("seed".into(), v.to_string()));
        }
        if let Some(v) = self.epochs {
            overrides.push(("epochs".into(), v.to_string()));
        }
        if let Some(v) = self.batch_size {
            overrides.push(("batch_size".into(), v.to_string()));
        }
        if let Some(v) = self.lr {
            overrides.push(("lr".into(), v.to_string()));
        }
        if let Some(v) = &self.update_interval {
            overrides.push(("update_interval".into(), v.clone()));
        }
        if let Some(v) = &self.sti_layers {
            overrides.push(("sti_layers".into(), v.clone()));
        }
        cfg.apply_all(&overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic RGB-T sequences with exact ground truth.
    Synthgen(SynthgenArgs),
    /// Train the single-branch RGB base tracker from scratch.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained base: train prompts / interaction / fusion only.
    Finetune(FinetuneArgs),
    /// Track one sequence with a trained checkpoint.
    Track(TrackArgs),
    /// Score a result file against a sequence's ground truth.
    Eval(EvalArgs),
    /// Train and evaluate the component-ablation family.
    Ablate(AblateArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthgenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences (directories seqNNN under --out).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 9.0)]
    target_half_w: f64,
    #[arg(long, default_value_t = 7.0)]
    target_half_h: f64,
    #[arg(long, default_value_t = 0.6)]
    speed: f64,
    #[arg(long, default_value_t = 0.15)]
    scale_amp: f64,
    #[arg(long, default_value_t = 4.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    deform_strength: f64,
    /// Auto-place blackout/deformation/occlusion events.
    #[arg(long, conflicts_with = "clean")]
    eventful: bool,
    /// No events at all (pretraining data).
    #[arg(long)]
    clean: bool,
    /// Explicit event span START:END (repeatable).
    #[arg(long, value_name = "START:END")]
    rgb_blackout: Vec<String>,
    #[arg(long, value_name = "START:END")]
    tir_crossover: Vec<String>,
    #[arg(long, value_name = "START:END")]
    occlusion: Vec<String>,
    #[arg(long, value_name = "START:END")]
    deformation: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of training sequences.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Training log file (line-delimited records).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pretrained base checkpoint directory.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Architecture to train: prompt | no-sti | full.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory (visible/ + infrared/ + groundtruth.txt).
    #[arg(long)]
    sequence: PathBuf,
    /// Output result file, one x,y,w,h line per frame; a .conf sidecar is
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Write per-frame overlay PNGs here.
    #[arg(long)]
    emit_overlays: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Result file produced by `track`.
    #[arg(long)]
    results: PathBuf,
    /// Sequence directory holding the ground truth.
    #[arg(long)]
    sequence: PathBuf,
    /// Text report path (also printed).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Machine-readable key=value metrics file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for success/precision curve images.
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    pretrain_data: PathBuf,
    #[arg(long)]
    finetune_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Working directory for checkpoints and tables.
    #[arg(long)]
    work: PathBuf,
    /// Also run the insertion-layer sweep table.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random seeds per check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Also run the full-model loss gradcheck (slower).
    #[arg(long)]
    full: bool,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synthgen(args) => cmd_synthgen(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn parse_span(kind: EventKind, spec: &str) -> Result<EventSpan> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        return Err(ModelError::Config(format!("event span '{spec}' must be START:END")));
    }
    let start = parts[0]
        .parse()
        .map_err(|e| ModelError::Config(format!("bad span start: {e}")))?;
    let end = parts[1]
        .parse()
        .map_err(|e| ModelError::Config(format!("bad span end: {e}")))?;
    Ok(EventSpan { kind, start, end })
}

fn cmd_synthgen(args: SynthgenArgs) -> Result<()> {
    let mut explicit = Vec::new();
    for (kind, specs) in [
        (EventKind::RgbBlackout, &args.rgb_blackout),
        (EventKind::TirCrossover, &args.tir_crossover),
        (EventKind::Occlusion, &args.occlusion),
        (EventKind::Deformation, &args.deformation),
    ] {
        for s in specs {
            explicit.push(parse_span(kind, s)?);
        }
    }
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9) ^ args.seed.rotate_left(17);
        let mut cfg = if !explicit.is_empty() {
            SynthConfig {
                events: explicit.clone(),
                ..SynthConfig::default()
            }
        } else if args.eventful {
            synth::eventful_config(seed, args.frames)
        } else {
            synth::clean_config(seed, args.frames)
        };
        cfg.frames = args.frames;
        cfg.width = args.width;
        cfg.height = args.height;
        cfg.target_half_w = args.target_half_w;
        cfg.target_half_h = args.target_half_h;
        cfg.speed = args.speed;
        cfg.scale_amp = args.scale_amp;
        cfg.noise = args.noise;
        cfg.deform_strength = args.deform_strength;
        cfg.seed = seed;
        let dir = if args.count == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("seq{i:03}"))
        };
        synth::generate_synthetic(&cfg, &dir)?;
        println!("wrote {} ({} frames)", dir.display(), cfg.frames);
    }
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Vec<LoadedSequence>> {
    let dirs = dataset::list_sequence_dirs(root)?;
    dirs.iter().map(|d| LoadedSequence::load(d)).collect()
}

fn log_writer(path: &Option<PathBuf>) -> Box<dyn FnMut(&trainer::TrainLogEntry)> {
    match path {
        Some(p) => {
            let mut file = std::fs::File::create(p).expect("create log file");
            Box::new(move |e| {
                use std::io::Write;
                let _ = writeln!(file, "{e}");
            })
        }
        None => Box::new(|e| {
            if e.step == 0 {
                println!("{e}");
            }
        }),
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = load_dataset(&args.data)?;
    let model_cfg = ModelConfig::new(cfg.backbone.clone(), VariantConfig::rgb_baseline())?;
    let mut log = log_writer(&args.log);
    let (model, outcome) =
        trainer::pretrain_base::<f32>(model_cfg, &data, &cfg.train, cfg.train.seed, |e| log(e))?;
    checkpoint::save(&model.params, &args.out)?;
    println!(
        "pretrained base saved to {} (final loss {:.4})",
        args.out.display(),
        outcome.final_loss
    );
    Ok(())
}

fn variant_from_name(name: &str, sti_layers: &[usize]) -> Result<VariantConfig> {
    match name {
        "prompt" => Ok(VariantConfig::prompt_baseline()),
        "no-sti" => Ok(VariantConfig::dual_no_sti()),
        "full" => Ok(VariantConfig::full(sti_layers.to_vec())),
        other => Err(ModelError::Config(format!(
            "unknown variant '{other}' (expected prompt | no-sti | full)"
        ))),
    }
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = load_dataset(&args.data)?;
    let variant = variant_from_name(&args.variant, &cfg.sti_layers)?;
    let model_cfg = ModelConfig::new(cfg.backbone.clone(), variant)?;
    let mut log = log_writer(&args.log);
    let (model, outcome) = trainer::finetune::<f32>(
        model_cfg,
        &args.base,
        &data,
        &cfg.train,
        cfg.train.seed.wrapping_add(101),
        |e| log(e),
    )?;
    checkpoint::save(&model.params, &args.out)?;
    println!(
        "finetuned '{}' saved to {} (final loss {:.4})",
        args.variant,
        args.out.display(),
        outcome.final_loss
    );
    Ok(())
}

/// Reconstruct the architecture flags from a checkpoint's parameter names.
fn variant_from_checkpoint(dir: &Path) -> Result<VariantConfig> {
    let mpath = dir.join(checkpoint::MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| ModelError::io(mpath.display().to_string(), e))?;
    let entries =
        parse_manifest(&text).map_err(|e| ModelError::load(mpath.display().to_string(), e))?;
    let has = |prefix: &str| entries.iter().any(|e| e.name.starts_with(prefix));
    let mut sti_layers: Vec<usize> = entries
        .iter()
        .filter_map(|e| {
            e.name
                .strip_prefix("sti.l")
                .and_then(|rest| rest.split('.').next())
                .and_then(|l| l.parse().ok())
        })
        .collect();
    sti_layers.sort_unstable();
    sti_layers.dedup();
    Ok(VariantConfig {
        use_mcp: has("mcp.init."),
        dual_branch: has("fusion."),
        sti_layers,
    })
}

fn cmd_track(args: TrackArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let variant = variant_from_checkpoint(&args.checkpoint)?;
    let model_cfg = ModelConfig::new(cfg.backbone.clone(), variant)?;
    let model = TrackModel::<f32>::new(model_cfg, 0)?;
    checkpoint::load(&model.params, &args.checkpoint)?;

    let seq = LoadedSequence::load(&args.sequence)?;
    let runtime = RuntimeConfig {
        update_interval: cfg.update_interval,
        ..RuntimeConfig::default()
    };
    let run = track_sequence(&model, runtime, &seq)?;
    write_results(&args.out, &run.boxes)?;
    let conf_path = args.out.with_extension("conf");
    write_confidences(&conf_path, &run.confidences)?;
    println!(
        "tracked {} frames at {:.1} fps -> {} (+ {})",
        seq.len(),
        run.fps,
        args.out.display(),
        conf_path.display()
    );

    if let Some(overlay_dir) = &args.emit_overlays {
        std::fs::create_dir_all(overlay_dir)
            .map_err(|e| ModelError::io(overlay_dir.display().to_string(), e))?;
        for (i, (frame, b)) in seq.frames.iter().zip(&run.boxes).enumerate() {
            let mut img = frame.0.clone();
            draw_box(&mut img, b, [60, 255, 60]);
            draw_box(&mut img, &seq.meta.boxes[i], [255, 60, 60]);
            img.save_png(&overlay_dir.join(format!("{i:05}.png")))?;
        }
        println!("overlays in {}", overlay_dir.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let seq = dataset::load_sequence(&args.sequence)?;
    let text = std::fs::read_to_string(&args.results)
        .map_err(|e| ModelError::io(args.results.display().to_string(), e))?;
    let results: Vec<BBox> = dataset::parse_groundtruth(&text)
        .map_err(|e| ModelError::load(args.results.display().to_string(), e))?;
    let evals = metrics::eval_sequence(&results, &seq.boxes)?;
    let overall = metrics::aggregate(evals.iter())
        .ok_or_else(|| ModelError::Input("empty sequence".into()))?;

    let mut report = format!("sequence {}\noverall: {}\n", seq.name, overall);
    let mut kv = metrics::render_kv(&overall, "");
    for tag in ATTRIBUTE_CODES {
        let frames = seq.frames_with_attribute(tag);
        let selected: Vec<&metrics::FrameEval> = frames.iter().map(|&f| &evals[f]).collect();
        if let Some(m) = metrics::aggregate(selected) {
            report.push_str(&format!("{tag}: {m}\n"));
            kv.push_str(&metrics::render_kv(&m, &format!("{tag}.")));
        }
        // attribute absent in this sequence: omitted rather than zeroed
    }
    print!("{report}");
    if let Some(p) = &args.report {
        std::fs::write(p, &report).map_err(|e| ModelError::io(p.display().to_string(), e))?;
    }
    if let Some(p) = &args.metrics {
        std::fs::write(p, &kv).map_err(|e| ModelError::io(p.display().to_string(), e))?;
    }
    if let Some(dir) = &args.plots {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir.display().to_string(), e))?;
        let sc = metrics::success_curve(&evals);
        render_curve(&sc, 1.0, [200, 30, 30]).save_png(&dir.join("success.png"))?;
        let pc = metrics::precision_curve(&evals);
        render_curve(&pc, 50.0, [30, 30, 200]).save_png(&dir.join("precision.png"))?;
        println!("plots in {}", dir.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let pretrain_data = load_dataset(&args.pretrain_data)?;
    let finetune_data = load_dataset(&args.finetune_data)?;
    let default_interval = cfg.update_interval.unwrap_or(50);

    println!("training variant suite (seed {})...", cfg.train.seed);
    let ckpts = ablation::train_suite::<f32>(
        cfg.backbone.clone(),
        &cfg.sti_layers,
        &pretrain_data,
        &finetune_data,
        &cfg.train,
        &cfg.train,
        &args.work,
        cfg.train.seed,
        true,
        |stage, e| {
            if e.step == 0 {
                println!("[{stage}] {e}");
            }
        },
    )?;

    let mut rows = Vec::new();
    for variant in Variant::all() {
        let ckpt = match variant.checkpoint_key() {
            "base" => Some(ckpts.base.clone()),
            "prompt" => Some(ckpts.prompt.clone()),
            "no_sti" => ckpts.no_sti.clone(),
            _ => Some(ckpts.full.clone()),
        };
        let (mcp, sti, ots) = variant.flags();
        let report = match ckpt {
            Some(dir) => ablation::evaluate_variant::<f32>(
                variant,
                &cfg.backbone,
                &cfg.sti_layers,
                &dir,
                default_interval,
                &args.test_data,
            )?
            .pooled(),
            None => None,
        };
        rows.push(AblationRow {
            label: variant.label().to_string(),
            mcp,
            sti,
            ots,
            report,
        });
    }
    let table = AblationTable(rows);
    println!("\ncomponent table:\n{table}");
    let table_path = args.work.join("component_table.txt");
    std::fs::write(&table_path, table.to_string())
        .map_err(|e| ModelError::io(table_path.display().to_string(), e))?;

    if args.sweep {
        println!("insertion-layer sweep...");
        let mut sweep_rows = Vec::new();
        for k in 0..=cfg.sti_layers.len() {
            let layers = cfg.sti_layers[..k].to_vec();
            let variant_cfg = if layers.is_empty() {
                VariantConfig::dual_no_sti()
            } else {
                VariantConfig::full(layers.clone())
            };
            let model_cfg = ModelConfig::new(cfg.backbone.clone(), variant_cfg)?;
            let mut ft = cfg.train.clone();
            ft.seed = cfg.train.seed.wrapping_add(7 + k as u64);
            let (model, _) = trainer::finetune::<f32>(
                model_cfg,
                &ckpts.base,
                &finetune_data,
                &ft,
                cfg.train.seed + 40 + k as u64,
                |_| {},
            )?;
            let run = ablation::evaluate_model(
                &model,
                RuntimeConfig {
                    update_interval: Some(default_interval),
                    ..RuntimeConfig::default()
                },
                &args.test_data,
            )?;
            if let Some(report) = run.pooled() {
                sweep_rows.push(SweepRow { layers, report });
            }
        }
        let sweep = SweepTable(sweep_rows);
        println!("\n{sweep}");
        let sweep_path = args.work.join("insertion_sweep.txt");
        std::fs::write(&sweep_path, sweep.to_string())
            .map_err(|e| ModelError::io(sweep_path.display().to_string(), e))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut failures = 0;
    println!("op-level finite-difference checks ({} seeds each):", args.seeds);
    for (name, shapes) in [
        ("matmul", vec![("a", vec![4usize, 5]), ("b", vec![5, 3])]),
        ("softmax", vec![("x", vec![6])]),
        ("layer_norm", vec![("x", vec![3, 8]), ("g", vec![8]), ("b", vec![8])]),
        ("conv1x1", vec![("x", vec![4, 5, 5]), ("w", vec![3, 4]), ("b", vec![3])]),
        ("activations", vec![("x", vec![7])]),
    ] {
        for seed in 0..args.seeds {
            let mut rng = Rng::new(seed * 31 + 7);
            let mut store = tempotrack_tensor::ParamStore::<f64>::new();
            for (pname, shape) in &shapes {
                store.register(*pname, rng.normal_tensor(shape, 0.8), true);
            }
            let report = gradcheck(
                &store,
                |g| build_op_loss(name, g, &store),
                &GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                },
            )
            .map_err(ModelError::Tensor)?;
            if !report.passed {
                failures += 1;
                println!("  {name} seed {seed}: {report}");
            }
        }
        println!("  {name}: ok");
    }

    if args.full {
        println!("full-model loss gradcheck (reduced config):");
        let bb = BackboneConfig {
            patch_size: 8,
            token_dim: 16,
            depth: 2,
            num_heads: 2,
            ffn_ratio: 2,
            template_side: 16,
            search_side: 32,
        };
        for seed in 0..args.seeds {
            let model_cfg = ModelConfig::new(bb.clone(), VariantConfig::full(vec![1]))?;
            let model = TrackModel::<f64>::new(model_cfg, seed)?;
            let mut rng = Rng::new(seed + 500);
            // move off the zero-bias relu kinks before differencing
            tempotrack_tensor::jitter_params(&model.params, &mut rng, 0.05);
            let tpl = FramePair::new(
                rng.normal_tensor(&[3, 16, 16], 0.3),
                rng.normal_tensor(&[3, 16, 16], 0.3),
            );
            let online = FramePair::new(
                rng.normal_tensor(&[3, 16, 16], 0.3),
                rng.normal_tensor(&[3, 16, 16], 0.3),
            );
            let search = FramePair::new(
                rng.normal_tensor(&[3, 32, 32], 0.3),
                rng.normal_tensor(&[3, 32, 32], 0.3),
            );
            let gt = BBox::new(0.55, 0.45, 0.3, 0.25);
            let report = gradcheck(
                &model.params,
                |g| {
                    let maps = model
                        .dual_forward(g, &tpl, &online, &search, false)
                        .map_err(|e| tempotrack_tensor::TensorError::usage(e.to_string()))?;
                    let loss = total_loss(g, &maps, &gt, &Default::default())
                        .map_err(|e| tempotrack_tensor::TensorError::usage(e.to_string()))?;
                    Ok(loss.total)
                },
                &GradCheckConfig {
                    rel_tol: 1e-3,
                    sample_per_param: Some(4),
                    seed,
                    ..GradCheckConfig::default()
                },
            )
            .map_err(ModelError::Tensor)?;
            println!("  seed {seed}: {report}");
            if !report.passed {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(ModelError::Train(format!("{failures} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn build_op_loss(
    name: &str,
    g: &mut Graph<f64>,
    store: &tempotrack_tensor::ParamStore<f64>,
) -> tempotrack_tensor::Result<tempotrack_tensor::ValueId> {
    use tempotrack_tensor::Tensor;
    match name {
        "matmul" => {
            let a = g.param(store.get("a").unwrap());
            let b = g.param(store.get("b").unwrap());
            let c = g.matmul(a, b)?;
            g.sum_all(c)
        }
        "softmax" => {
            let x = g.param(store.get("x").unwrap());
            let y = g.softmax_lastdim(x)?;
            let w = g.constant(Tensor::from_fn(&[6], |i| i as f64));
            let z = g.mul(y, w)?;
            g.sum_all(z)
        }
        "layer_norm" => {
            let x = g.param(store.get("x").unwrap());
            let y = g.layer_norm(x, store.get("g").unwrap(), store.get("b").unwrap(), 1e-6)?;
            let w = g.constant(Tensor::from_fn(&[3, 8], |i| (i % 5) as f64 - 2.0));
            let z = g.mul(y, w)?;
            g.sum_all(z)
        }
        "conv1x1" => {
            let x = g.param(store.get("x").unwrap());
            let y = g.conv1x1(x, store.get("w").unwrap(), store.get("b").unwrap())?;
            let m = g.constant(Tensor::from_fn(&[3, 5, 5], |i| ((i % 11) as f64) / 5.0 - 1.0));
            let z = g.mul(y, m)?;
            g.sum_all(z)
        }
        "activations" => {
            let x = g.param(store.get("x").unwrap());
            let r = g.relu(x)?;
            let e = g.gelu(r)?;
            let s = g.sigmoid(e)?;
            g.sum_all(s)
        }
        _ => unreachable!("unknown op check"),
    }
}
