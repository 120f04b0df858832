//! The pipeline stages behind each subcommand.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use introspect_core::detector::{
    pillarize, prepare_frames, train_detector_streaming as fit_detector, ActivationBundle,
    PillarDetector,
};
use introspect_core::errorset::{
    build_error_dataset, label_frame, read_error_dataset, ErrorDataset, Label, Split,
};
use introspect_core::evaluation::{
    benchmark_latency, confusion_buckets, count_flops, eigen_cam, emit_report, ComplexityReport,
    FlopUnit, MetricsReport,
};
use introspect_core::introspector::{
    history_csv, load_split, nap_for, train_introspector as fit_introspector, Introspector,
    IntrospectorConfig,
};
use introspect_core::naps::{select_nap, NapMode};
use introspect_core::scene::{generate_dataset, generate_scene, SCENE_INDEX_FILE};
use introspect_core::store::{write_bundle, TensorRecord, MANIFEST_FILE};
use introspect_nn::{Module, Rng64, Tensor};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Offsets that derive per-stage seeds from the experiment seed.
const DETECTOR_INIT: u64 = 1;
const DETECTOR_SHUFFLE: u64 = 2;
const SPLIT_SEED: u64 = 3;
const INTROSPECTOR_BASE: u64 = 100;
const DETECTOR_TRAIN_SCENES: u64 = 1_000_000;
const DETECTOR_EVAL_SCENES: u64 = 2_000_000;

pub const RUN_FILE: &str = "run.json";

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Self {
        let hash = cfg.hash();
        Self { cfg, out, hash }
    }

    pub fn scenes_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.scenes)
    }

    pub fn detector_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.detector)
    }

    pub fn errorset_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.errorset)
    }

    pub fn introspector_dir(&self, mode: NapMode) -> PathBuf {
        self.out
            .join(&self.cfg.paths.introspectors)
            .join(mode.as_str())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.reports)
    }

    pub fn explain_dir(&self, mode: NapMode) -> PathBuf {
        self.out.join(&self.cfg.paths.explain).join(mode.as_str())
    }

    fn seed(&self, offset: u64) -> u64 {
        self.cfg.seed.wrapping_add(offset)
    }

    fn mode_seed(&self, mode: NapMode) -> u64 {
        let idx = NapMode::ALL
            .iter()
            .position(|m| *m == mode)
            .expect("known mode") as u64;
        self.seed(INTROSPECTOR_BASE + idx)
    }

    /// Records provenance for a stage directory.
    fn write_run(
        &self,
        dir: &Path,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<(), CliError> {
        let rel = |p: &PathBuf| p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
        let doc = json!({
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "inputs": inputs.iter().map(rel).collect::<Vec<_>>(),
            "outputs": outputs.iter().map(rel).collect::<Vec<_>>(),
            "config": self.cfg,
        });
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
        write_text(
            &dir.join(RUN_FILE),
            &(serde_json::to_string_pretty(&doc).expect("json") + "\n"),
        )
    }
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("json") + "\n"),
    )
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{what} not found at {}; run the producing stage first",
            path.display()
        )))
    }
}

pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    let dir = ctx.scenes_dir();
    info!(
        "generating {} scenes into {}",
        ctx.cfg.n_scenes,
        dir.display()
    );
    let index = generate_dataset(&ctx.cfg.scene, ctx.cfg.n_scenes, ctx.cfg.seed, &dir)?;
    let boxes: usize = index.iter().map(|e| e.n_boxes).sum();
    info!("wrote {} scenes with {boxes} boxes", index.len());
    ctx.write_run(&dir, "gen-data", &[], &[dir.join(SCENE_INDEX_FILE)])
}

#[derive(Serialize)]
struct DetectorEval {
    n_frames: usize,
    n_error_frames: usize,
    frame_miss_rate: f64,
    n_gt: usize,
    n_missed: usize,
}

pub fn train_detector(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let hyper = &cfg.detector_train;
    let dir = ctx.detector_dir();
    let mut model = PillarDetector::new(
        cfg.grid.clone(),
        cfg.detector.clone(),
        ctx.seed(DETECTOR_INIT),
    )?;
    let n = hyper.n_train_scenes as u64;
    info!(
        "training detector on {n} scenes per epoch (resample: {})",
        hyper.resample_each_epoch
    );
    let probe = model.clone();
    let logs = fit_detector(
        &mut model,
        hyper,
        ctx.seed(DETECTOR_SHUFFLE),
        |epoch| {
            let offset = if hyper.resample_each_epoch {
                epoch as u64 * n
            } else {
                0
            };
            let scenes = (0..n)
                .map(|i| generate_scene(&cfg.scene, ctx.seed(DETECTOR_TRAIN_SCENES + offset + i)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Cow::Owned(prepare_frames(
                &probe,
                &scenes,
                hyper.min_target_points,
            )?))
        },
        |l| info!("detector epoch {} loss {:.5} lr {}", l.epoch, l.loss, l.lr),
    )?;
    model.save(&dir)?;
    let mut csv = String::from("epoch,loss,lr\n");
    for l in &logs {
        csv.push_str(&format!("{},{:.8},{:.8}\n", l.epoch, l.loss, l.lr));
    }
    write_text(&dir.join("train_log.csv"), &csv)?;

    let mut eval = DetectorEval {
        n_frames: hyper.n_eval_scenes,
        n_error_frames: 0,
        frame_miss_rate: 0.0,
        n_gt: 0,
        n_missed: 0,
    };
    for i in 0..hyper.n_eval_scenes as u64 {
        let scene = generate_scene(&cfg.scene, ctx.seed(DETECTOR_EVAL_SCENES + i))?;
        let ppc = pillarize(&scene, model.grid())?;
        let (dets, _) = model.forward(&ppc, false, &scene.scene_id)?;
        let (label, missed) = label_frame(&scene.gt_boxes, &dets, &cfg.errorset.rule);
        eval.n_error_frames += usize::from(label == Label::Error);
        eval.n_gt += scene.gt_boxes.len();
        eval.n_missed += missed;
    }
    eval.frame_miss_rate = eval.n_error_frames as f64 / eval.n_frames.max(1) as f64;
    info!(
        "held-out frame miss rate {:.4} over {} frames",
        eval.frame_miss_rate, eval.n_frames
    );
    if eval.n_frames > 0 && !(0.1..=0.9).contains(&eval.frame_miss_rate) {
        warn!(
            "frame miss rate {:.4} is outside [0.1, 0.9]; the error dataset will be lopsided",
            eval.frame_miss_rate
        );
    }
    write_json(&dir.join("eval.json"), &eval)?;
    ctx.write_run(
        &dir,
        "train-detector",
        &[],
        &[
            dir.join(MANIFEST_FILE),
            dir.join("train_log.csv"),
            dir.join("eval.json"),
        ],
    )
}

pub fn build_errorset(ctx: &Context) -> Result<(), CliError> {
    let scenes = ctx.scenes_dir();
    let det_dir = ctx.detector_dir();
    require(&scenes.join(SCENE_INDEX_FILE), "scene index")?;
    require(&det_dir.join(MANIFEST_FILE), "detector checkpoint")?;
    let model = PillarDetector::load(&det_dir)?;
    let out = ctx.errorset_dir();
    let ds = build_error_dataset(
        &scenes,
        &model,
        &ctx.cfg.errorset,
        ctx.seed(SPLIT_SEED),
        &out,
        |i, n| {
            if i % 250 == 0 || i == n {
                info!("labelled {i}/{n} frames");
            }
        },
    )?;
    report_dataset(&ds);
    ctx.write_run(
        &out,
        "build-errorset",
        &[scenes.join(SCENE_INDEX_FILE), det_dir],
        &[out.join("index.jsonl")],
    )
}

pub(crate) fn report_dataset(ds: &ErrorDataset) {
    let (n_err, n_ok) = ds.class_counts();
    info!(
        "error dataset: {} frames, {n_err} Error, {n_ok} NoError; train {} val {} test {}",
        ds.records.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        ds.split(Split::Test).len()
    );
}

fn load_dataset(ctx: &Context) -> Result<ErrorDataset, CliError> {
    let dir = ctx.errorset_dir();
    require(&dir.join("index.jsonl"), "error dataset")?;
    Ok(read_error_dataset(&dir)?)
}

pub fn train_introspector(ctx: &Context, modes: &[NapMode]) -> Result<(), CliError> {
    let ds = load_dataset(ctx)?;
    let hyper = &ctx.cfg.train;
    for &mode in modes {
        let train = load_split(&ds, mode, Split::Train, hyper.zeroing_percentile)?;
        let val = load_split(&ds, mode, Split::Val, hyper.zeroing_percentile)?;
        let config = IntrospectorConfig {
            mode,
            input_shape: train.sample_shape.clone(),
            width_multiplier: ctx.cfg.introspector.width_multiplier,
            mlp_hidden: ctx.cfg.introspector.mlp_hidden.clone(),
        };
        info!(
            "training {mode} introspector on {} frames (input {:?})",
            train.len(),
            config.input_shape
        );
        let outcome = fit_introspector(
            &train,
            &val,
            &config,
            hyper,
            ctx.mode_seed(mode),
            |lr, r| {
                info!(
                    "{mode} lr0 {lr} epoch {} train {:.6} val {:.6} lr {:.6}",
                    r.epoch, r.train_loss, r.val_loss, r.lr
                )
            },
        )?;
        let dir = ctx.introspector_dir(mode);
        outcome.model.save(&dir)?;
        write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;
        write_json(
            &dir.join("train.json"),
            &json!({
                "mode": mode,
                "epochs_run": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "best_val_loss": outcome.best_val_loss,
                "lr": outcome.lr,
                "class_weights": [outcome.class_weights.0, outcome.class_weights.1],
                "params": outcome.model.num_parameters(),
            }),
        )?;
        info!(
            "{mode}: best epoch {} val loss {:.6}",
            outcome.best_epoch, outcome.best_val_loss
        );
        ctx.write_run(
            &dir,
            "train-introspector",
            &[ds.root.join("index.jsonl")],
            &[dir.join("history.csv")],
        )?;
    }
    Ok(())
}

fn load_model(ctx: &Context, mode: NapMode) -> Result<Introspector, CliError> {
    let dir = ctx.introspector_dir(mode);
    require(
        &dir.join(MANIFEST_FILE),
        &format!("{mode} introspector checkpoint"),
    )?;
    Ok(Introspector::load(&dir)?)
}

pub fn evaluate(ctx: &Context, modes: &[NapMode]) -> Result<(), CliError> {
    let ds = load_dataset(ctx)?;
    let mut metrics = Vec::new();
    let mut buckets = Vec::new();
    let mut inputs = vec![ds.root.join("index.jsonl")];
    for &mode in modes {
        let model = load_model(ctx, mode)?;
        inputs.push(ctx.introspector_dir(mode));
        let test = load_split(&ds, mode, Split::Test, ctx.cfg.train.zeroing_percentile)?;
        let verdicts = model.predict_samples(&test)?;
        let report = MetricsReport::from_verdicts(mode, &verdicts, &test.labels)?;
        info!(
            "{mode}: auroc {} rec+ {} rec- {} on {} frames",
            fmt_opt(report.auroc),
            fmt_opt(report.recall_pos),
            fmt_opt(report.recall_neg),
            report.n_samples
        );
        metrics.push(report);
        buckets.push((mode, confusion_buckets(&verdicts, &test.labels)?));
    }
    let dir = ctx.reports_dir();
    let mut outputs = emit_report(&metrics, &buckets, &[], &dir)?;
    if ctx.cfg.evaluation.plots {
        outputs.extend(confidence_plots(&dir, &buckets)?);
    }
    ctx.write_run(&dir, "evaluate", &inputs, &outputs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

#[cfg(feature = "plots")]
fn confidence_plots(
    dir: &Path,
    buckets: &[(NapMode, introspect_core::evaluation::ConfidenceBuckets)],
) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for (mode, b) in buckets {
        let path = dir.join(format!("confidence_{mode}.png"));
        introspect_core::evaluation::plots::confidence_png(&path, b)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(not(feature = "plots"))]
fn confidence_plots(
    _: &Path,
    _: &[(NapMode, introspect_core::evaluation::ConfidenceBuckets)],
) -> Result<Vec<PathBuf>, CliError> {
    Ok(Vec::new())
}

/// Tap shapes `[ppc, mla, lla]` implied by the configured detector.
pub fn tap_shapes(cfg: &ExperimentConfig) -> Result<[[usize; 3]; 3], CliError> {
    Ok(PillarDetector::new(cfg.grid.clone(), cfg.detector.clone(), 0)?.tap_shapes())
}

pub fn profile(ctx: &Context, modes: &[NapMode]) -> Result<(), CliError> {
    let [ppc, mla, lla] = tap_shapes(&ctx.cfg)?;
    // A representative frame: the first test record when a dataset exists,
    // otherwise seeded noise with the configured shapes.
    let bundle = match load_dataset(ctx) {
        Ok(ds) => match ds.split(Split::Test).first() {
            Some(r) => ds.load_bundle(r)?,
            None => noise_bundle(ppc, mla, lla, ctx.cfg.seed),
        },
        Err(_) => noise_bundle(ppc, mla, lla, ctx.cfg.seed),
    };
    let eval = &ctx.cfg.evaluation;
    let mut reports = Vec::new();
    for &mode in modes {
        let input_shape = mode.input_shape(ppc, mla, lla);
        let model = match load_model(ctx, mode) {
            Ok(m) => m,
            Err(_) => {
                let config = IntrospectorConfig {
                    mode,
                    input_shape: input_shape.clone(),
                    width_multiplier: ctx.cfg.introspector.width_multiplier,
                    mlp_hidden: ctx.cfg.introspector.mlp_hidden.clone(),
                };
                Introspector::new(config, ctx.mode_seed(mode))?
            }
        };
        let macs = count_flops(&model, &input_shape, FlopUnit::Macs)?;
        let stats = benchmark_latency(eval.latency_iterations, eval.latency_warmup, || {
            let nap = select_nap(&bundle, mode)?;
            std::hint::black_box(model.predict(&nap)?);
            Ok(())
        })?;
        info!(
            "{mode}: {macs} MACs, {} params, latency {:.3} +- {:.3} ms",
            model.num_parameters(),
            stats.mean_ms,
            stats.std_ms
        );
        reports.push(ComplexityReport {
            mode,
            input_shape,
            params: model.num_parameters(),
            flops: macs,
            latency_mean_ms: stats.mean_ms,
            latency_std_ms: stats.std_ms,
            iterations: stats.iterations,
            warmup_excluded: stats.warmup_excluded,
        });
    }
    let dir = ctx.reports_dir();
    let outputs = emit_report(&[], &[], &reports, &dir)?;
    fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    ctx.write_run(&dir.join("profile"), "profile", &[], &outputs)
}

fn noise_bundle(ppc: [usize; 3], mla: [usize; 3], lla: [usize; 3], seed: u64) -> ActivationBundle {
    let mut rng = Rng64::derive(seed, 0xB0B);
    let mut t = |s: [usize; 3]| {
        let n = s.iter().product();
        Tensor::from_vec(&s, (0..n).map(|_| rng.uniform().max(0.0) as f32).collect())
    };
    ActivationBundle {
        ppc: t(ppc),
        mla: t(mla),
        lla: t(lla),
        frame_id: "noise".into(),
    }
}

pub fn explain(ctx: &Context, modes: &[NapMode]) -> Result<(), CliError> {
    let ds = load_dataset(ctx)?;
    let test = ds.split(Split::Test);
    let n = ctx.cfg.evaluation.explain_frames.min(test.len());
    for &mode in modes {
        if !mode.is_spatial() {
            info!("{mode}: no spatial activations to explain, skipped");
            continue;
        }
        let model = load_model(ctx, mode)?;
        let dir = ctx.explain_dir(mode);
        fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        let mut records = Vec::new();
        let mut attrs = BTreeMap::new();
        let mut outputs = Vec::new();
        for r in test.iter().take(n) {
            let nap = nap_for(&ds, r, mode, ctx.cfg.train.zeroing_percentile)?;
            let (heat, stage) = eigen_cam(&model, &nap)?;
            attrs.insert("cam_stage".to_string(), format!("layer{}", stage + 1));
            attrs.insert(format!("label.{}", r.frame_id), r.label.to_string());
            records.push(TensorRecord::new(
                r.frame_id.clone(),
                heat.shape(),
                heat.data().to_vec(),
            )?);
            if ctx.cfg.evaluation.plots {
                outputs.extend(heatmap_plot(&dir, &r.frame_id, &heat, &nap.data)?);
            }
        }
        let bundle_dir = dir.join("heatmaps");
        write_bundle(&records, &attrs, &bundle_dir)?;
        outputs.push(bundle_dir);
        info!("{mode}: wrote {} heatmaps", records.len());
        ctx.write_run(&dir, "explain", &[ctx.introspector_dir(mode)], &outputs)?;
    }
    Ok(())
}

#[cfg(feature = "plots")]
fn heatmap_plot(
    dir: &Path,
    frame: &str,
    heat: &Tensor,
    input: &Tensor,
) -> Result<Vec<PathBuf>, CliError> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let hw = h * w;
    let energy: Vec<f32> = (0..hw)
        .map(|p| (0..c).map(|ch| input.data()[ch * hw + p].abs()).sum())
        .collect();
    let bg = Tensor::from_vec(&[h, w], energy);
    let scale = (256 / h.max(w)).max(1);
    let path = dir.join(format!("{frame}.png"));
    introspect_core::evaluation::plots::heatmap_png(&path, heat, Some(&bg), scale)?;
    Ok(vec![path])
}

#[cfg(not(feature = "plots"))]
fn heatmap_plot(_: &Path, _: &str, _: &Tensor, _: &Tensor) -> Result<Vec<PathBuf>, CliError> {
    Ok(Vec::new())
}

pub fn run_all(ctx: &Context) -> Result<(), CliError> {
    let modes = ctx.cfg.modes.clone();
    gen_data(ctx)?;
    train_detector(ctx)?;
    build_errorset(ctx)?;
    train_introspector(ctx, &modes)?;
    evaluate(ctx, &modes)?;
    profile(ctx, &modes)?;
    explain(ctx, &modes)?;
    ctx.write_run(&ctx.out, "run-all", &[], &[ctx.reports_dir()])
}
