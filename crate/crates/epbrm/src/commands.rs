//! The subcommands, as library functions over a [`RunConfig`].
//!
//! Human-readable progress goes to the `out` writer; diagnostics about
//! individual detections go to standard error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epbrm_core::checkpoint::Checkpoint;
use epbrm_core::network::{epbrm_forward, EpbrmModel, LossBreakdown, LossWeights, Membership};
use epbrm_core::pipeline::{crop_indices, detection_rng, refine, resample_indices, AugmentConfig, RefineStatus};
use epbrm_core::trainer::{StepReport, TrainObject, Trainer, TrainerConfig};
use epbrm_core::{Detection, ObjectClass, PointCloud};

use crate::config::RunConfig;
use crate::dataset::{self, LoadedScene, Scene};
use crate::kitti::{self, PredictionEntry};
use crate::localizer::{median_yaw, proposal_box, simulate_localizer, CenterNoise, LocalizerSpec};
use crate::report::{self, Report, SceneEval};
use crate::synth::{generate_scenes, SceneSpec};
use crate::training::{parallel_step, training_pool};

/// Independent stream for one use of the run seed.
pub fn keyed_rng(seed: u64, domain: &[u8; 8], index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(domain);
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"epbrm-io");
    ChaCha8Rng::from_seed(key)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing {what} path ({flag})"))
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub scenes: usize,
    pub objects: usize,
}

pub fn cmd_synth(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<SynthSummary> {
    let root = require(&cfg.out, "output", "--out")?;
    let spec = SceneSpec::new(cfg.class, cfg.objects);
    let scenes = generate_scenes(&spec, cfg.scenes, cfg.seed)?;
    dataset::prepare_output_dir(root, force)?;
    dataset::write_dataset(root, &scenes)?;
    let objects = scenes.iter().map(|s| s.ground_truths.len()).sum();
    writeln!(out, "wrote {} scenes with {} {} objects to {}", scenes.len(), objects, cfg.class, root.display())?;
    Ok(SynthSummary { scenes: scenes.len(), objects })
}

// ---------------------------------------------------------------- train

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

/// Writes through a temporary sibling and renames, so a reader never sees
/// half a checkpoint.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()).with_context(|| format!("writing checkpoint {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn trainer_config(cfg: &RunConfig) -> TrainerConfig {
    TrainerConfig {
        batch: cfg.batch,
        learning_rate: cfg.lr,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
        weights: LossWeights::default(),
        augment: AugmentConfig::new(cfg.dist_bound, cfg.n_points, cfg.class.sampling_region()),
    }
}

pub fn fresh_model(cfg: &RunConfig) -> Result<EpbrmModel> {
    EpbrmModel::new(cfg.model_config(), &mut keyed_rng(cfg.seed, b"initwts\0", 0)).map_err(|e| anyhow!("{e}"))
}

pub fn loss_header(has_center: bool) -> String {
    let mut h = String::from("iter total loc rot_cls rot_reg size");
    if has_center {
        h.push_str(" loc_center");
    }
    h.push_str(" used skipped");
    h
}

pub fn loss_line(r: &StepReport) -> String {
    let l: &LossBreakdown = &r.loss;
    let mut s = format!("{} {:.6} {:.6} {:.6} {:.6} {:.6}", r.iteration, l.total, l.loc, l.rot_cls, l.rot_reg, l.size);
    if let Some(c) = l.loc_center {
        s.push_str(&format!(" {c:.6}"));
    }
    s.push_str(&format!(" {} {}", r.used, r.skipped));
    s
}

/// Trains on `pool` until `iters`, calling `on_step` after each iteration.
pub fn run_training(
    trainer: &mut Trainer,
    pool: &[TrainObject],
    iters: u64,
    mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<()> {
    ensure!(!pool.is_empty(), "no training objects");
    while trainer.iteration < iters {
        let r = parallel_step(trainer, pool);
        on_step(trainer, &r)?;
    }
    Ok(())
}

fn load_scenes(cfg: &RunConfig, root: &Path) -> Result<Vec<LoadedScene>> {
    dataset::load_dataset(root, cfg.split.as_deref())
}

pub fn train_pool(cfg: &RunConfig, scenes: &[LoadedScene]) -> Vec<TrainObject> {
    training_pool(scenes.iter().map(|s| &s.scene), cfg.class, &trainer_config(cfg).augment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub objects: usize,
    pub iteration: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

fn checkpoint_of(t: &Trainer) -> Checkpoint {
    Checkpoint { model: t.model.clone(), seed: t.config.seed, iteration: t.iteration, optimizer: Some(t.optimizer.clone()) }
}

/// Trains from scratch, or from the checkpoint file when `resume` is set
/// and it exists. On resume the loss log keeps the lines up to the
/// checkpoint's iteration.
pub fn cmd_train(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let root = require(&cfg.dataset, "dataset", "--dataset")?;
    let ckpt_path = require(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
    let log_path = cfg.log.clone().unwrap_or_else(|| ckpt_path.with_extension("loss.txt"));

    let scenes = load_scenes(cfg, root)?;
    ensure!(!scenes.is_empty(), "dataset {} holds no scenes", root.display());
    let pool = train_pool(cfg, &scenes);
    ensure!(!pool.is_empty(), "dataset {} holds no {} objects with points", root.display(), cfg.class);

    let tcfg = trainer_config(cfg);
    let (mut trainer, mut log_lines) = if resume && ckpt_path.exists() {
        let ck = read_checkpoint(ckpt_path)?;
        ensure!(
            ck.model.config.class == cfg.class,
            "checkpoint is for class {}, config says {}",
            ck.model.config.class,
            cfg.class
        );
        let mut tcfg = tcfg;
        tcfg.seed = ck.seed;
        tcfg.augment = AugmentConfig::new(ck.model.config.dist_bound, ck.model.config.n_points, cfg.class.sampling_region());
        let mut t = Trainer::new(ck.model, tcfg);
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        t.iteration = ck.iteration;
        let kept: Vec<String> = fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| l.split_whitespace().next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|i| i <= ck.iteration))
            .map(String::from)
            .collect();
        writeln!(out, "resuming at iteration {}", t.iteration)?;
        (t, kept)
    } else {
        (Trainer::new(fresh_model(cfg)?, tcfg), Vec::new())
    };
    // fail early on an unwritable path
    write_checkpoint(ckpt_path, &checkpoint_of(&trainer))?;

    let has_center = trainer.model.has_centering();
    writeln!(out, "training {} on {} objects, {} parameters", cfg.class, pool.len(), trainer.model.num_parameters())?;
    let mut first = None;
    let mut last = None;
    let every = cfg.checkpoint_every.max(1);
    run_training(&mut trainer, &pool, cfg.iters, |t, r| {
        first.get_or_insert(r.loss.total);
        last = Some(r.loss.total);
        log_lines.push(loss_line(r));
        if t.iteration % every == 0 || t.iteration == cfg.iters {
            write_checkpoint(ckpt_path, &checkpoint_of(t))?;
            write_log(&log_path, has_center, &log_lines)?;
        }
        Ok(())
    })?;
    write_checkpoint(ckpt_path, &checkpoint_of(&trainer))?;
    write_log(&log_path, has_center, &log_lines)?;
    writeln!(out, "iteration {} loss {:.6}", trainer.iteration, last.unwrap_or(f64::NAN))?;
    Ok(TrainSummary { objects: pool.len(), iteration: trainer.iteration, first_loss: first, last_loss: last })
}

fn write_log(path: &Path, has_center: bool, lines: &[String]) -> Result<()> {
    let mut s = loss_header(has_center);
    s.push('\n');
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing loss log {}", path.display()))
}

// ---------------------------------------------------------------- refine

pub fn localizer_spec(cfg: &RunConfig) -> Result<LocalizerSpec> {
    let spec = LocalizerSpec {
        noise: CenterNoise::Uniform { half_width: cfg.noise },
        fn_rate: cfg.fn_rate,
        fp_rate: cfg.fp_rate,
        score_jitter: 0.05,
    };
    spec.validate().map_err(|e| anyhow!(e))?;
    Ok(spec)
}

/// Input detections of each scene: read from result files, or simulated.
pub fn input_detections(cfg: &RunConfig, scenes: &[LoadedScene]) -> Result<Vec<Vec<Detection>>> {
    match &cfg.detections {
        Some(dir) => scenes
            .iter()
            .map(|s| {
                let entries = dataset::load_predictions(dir, &s.scene.id, &s.calib)?;
                Ok(entries.into_iter().filter(|e| e.class == cfg.class).map(|e| Detection { bbox: None, ..e.detection }).collect())
            })
            .collect(),
        None => {
            let spec = localizer_spec(cfg)?;
            Ok(scenes
                .iter()
                .enumerate()
                .map(|(i, s)| simulate_localizer(&s.scene, cfg.class, &spec, &mut keyed_rng(cfg.seed, b"localize", i as u64)))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineSummary {
    pub detections: usize,
    pub refined: usize,
    pub passed_through: usize,
    /// Mean distance from each output box center to the nearest ground
    /// truth of the class, over outputs within the sampling radius of one.
    pub mean_center_error: Option<f64>,
    pub mean_input_error: Option<f64>,
    /// Same pairing, absolute error averaged over the three axes.
    pub mean_axis_error: Option<f64>,
    pub mean_input_axis_error: Option<f64>,
}

/// Offset from the nearest ground truth of the class within the sampling
/// radius.
fn nearest_gt_offset(scene: &Scene, class: ObjectClass, p: epbrm_core::Point3) -> Option<epbrm_core::Point3> {
    let r = class.sampling_region().radius;
    scene
        .objects_of(class)
        .map(|g| p - g.bbox.center)
        .filter(|d| d.norm() <= r)
        .min_by(|a, b| a.norm().total_cmp(&b.norm()))
}

#[derive(Default)]
struct ErrorSums {
    norm: f64,
    axis: f64,
}

impl ErrorSums {
    fn add(&mut self, d: epbrm_core::Point3) {
        self.norm += d.norm();
        self.axis += (d.x.abs() + d.y.abs() + d.z.abs()) / 3.0;
    }
}

/// Refines the detections of every scene with the checkpoint's model, or
/// with `unrefined` writes the plain proposal boxes (anchor size, median
/// labelled yaw). Detections the model cannot refine keep their proposal
/// box and are reported on standard error.
pub fn cmd_refine(cfg: &RunConfig, unrefined: bool, out: &mut dyn Write) -> Result<RefineSummary> {
    let root = require(&cfg.dataset, "dataset", "--dataset")?;
    let pred_dir = require(&cfg.predictions, "prediction output", "--pred")?;
    let model = if unrefined {
        None
    } else {
        let ck = read_checkpoint(require(&cfg.checkpoint, "checkpoint", "--checkpoint")?)?;
        ensure!(
            ck.model.config.class == cfg.class,
            "checkpoint is for class {}, config says {}",
            ck.model.config.class,
            cfg.class
        );
        Some(ck.model)
    };
    let scenes = load_scenes(cfg, root)?;
    let inputs = input_detections(cfg, &scenes)?;
    let yaw = median_yaw(scenes.iter().flat_map(|s| s.scene.objects_of(cfg.class).map(|g| &g.bbox)));
    fs::create_dir_all(pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;

    let mut summary = RefineSummary {
        detections: 0,
        refined: 0,
        passed_through: 0,
        mean_center_error: None,
        mean_input_error: None,
        mean_axis_error: None,
        mean_input_axis_error: None,
    };
    let (mut err, mut err_in, mut err_n) = (ErrorSums::default(), ErrorSums::default(), 0usize);
    for (i, (s, dets)) in scenes.iter().zip(&inputs).enumerate() {
        let outputs: Vec<(Detection, bool)> = match &model {
            None => dets.iter().map(|d| (d.with_box(proposal_box(d, cfg.class, yaw)), false)).collect(),
            Some(m) => {
                let seed = keyed_rng(cfg.seed, b"refine\0\0", i as u64).next_u64();
                refine(dets, &s.scene.cloud, m, seed)
                    .into_iter()
                    .enumerate()
                    .map(|(j, r)| match r.status {
                        RefineStatus::Refined => (r.detection, true),
                        status => {
                            eprintln!("scene {} detection {j}: not refined ({status:?}), proposal box kept", s.scene.id);
                            (r.detection.with_box(proposal_box(&r.detection, cfg.class, yaw)), false)
                        }
                    })
                    .collect()
            }
        };
        for ((d, refined), input) in outputs.iter().zip(dets) {
            summary.detections += 1;
            if *refined {
                summary.refined += 1;
            } else if model.is_some() {
                summary.passed_through += 1;
            }
            let center = d.bbox.expect("every output has a box").center;
            if let (Some(e), Some(e_in)) = (
                nearest_gt_offset(&s.scene, cfg.class, center),
                nearest_gt_offset(&s.scene, cfg.class, input.location),
            ) {
                err.add(e);
                err_in.add(e_in);
                err_n += 1;
            }
        }
        let entries: Vec<PredictionEntry> =
            outputs.into_iter().map(|(detection, _)| PredictionEntry { class: cfg.class, detection }).collect();
        kitti::write_predictions(&dataset::prediction_path(pred_dir, &s.scene.id), &entries, &s.calib)?;
    }
    if err_n > 0 {
        let n = err_n as f64;
        summary.mean_center_error = Some(err.norm / n);
        summary.mean_input_error = Some(err_in.norm / n);
        summary.mean_axis_error = Some(err.axis / n);
        summary.mean_input_axis_error = Some(err_in.axis / n);
    }
    writeln!(
        out,
        "{} detections in {} scenes: {} refined, {} passed through",
        summary.detections,
        scenes.len(),
        summary.refined,
        summary.passed_through
    )?;
    if let (Some(e), Some(i)) = (summary.mean_center_error, summary.mean_input_error) {
        writeln!(out, "mean center error {e:.4} m (input {i:.4} m)")?;
    }
    if let (Some(e), Some(i)) = (summary.mean_axis_error, summary.mean_input_axis_error) {
        writeln!(out, "mean per-axis center error {e:.4} m (input {i:.4} m)")?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- eval

pub fn evaluate_dirs(cfg: &RunConfig, root: &Path, pred_dir: &Path) -> Result<Report> {
    let scenes = load_scenes(cfg, root)?;
    let preds: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            Ok(dataset::load_predictions(pred_dir, &s.scene.id, &s.calib)?
                .into_iter()
                .filter(|e| e.class == cfg.class)
                .map(|e| e.detection)
                .collect())
        })
        .collect::<Result<_>>()?;
    let evals: Vec<SceneEval<'_>> = scenes
        .iter()
        .zip(preds)
        .map(|(s, predictions)| SceneEval { ground_truths: s.scene.objects_of(cfg.class).collect(), predictions })
        .collect();
    report::evaluate(&evals, cfg.class, cfg.level, cfg.iou_threshold(), cfg.interpolation).map_err(|e| {
        if matches!(e, epbrm_core::evaluator::EvalError::MissingDifficultyFields(_)) {
            anyhow!("{e}; labels lack the fields for difficulty filtering, use --level all")
        } else {
            anyhow!("{e}")
        }
    })
}

/// Writes the text report to `report` (stdout when absent) and the JSON form
/// next to it with a `.json` extension.
pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<Report> {
    let root = require(&cfg.dataset, "dataset", "--dataset")?;
    let pred_dir = require(&cfg.predictions, "predictions", "--pred")?;
    let report = evaluate_dirs(cfg, root, pred_dir)?;
    match &cfg.report {
        Some(p) => {
            fs::write(p, report.to_text()).with_context(|| format!("writing {}", p.display()))?;
            let j = p.with_extension("json");
            fs::write(&j, report.to_json()).with_context(|| format!("writing {}", j.display()))?;
            write!(out, "{}", report.to_text())?;
        }
        None => write!(out, "{}", report.to_text())?,
    }
    Ok(report)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dist_bound: f64,
    pub noise: f64,
    pub ratio: f64,
    pub mean_center_error: Option<f64>,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("dist_bound noise ratio center_error\n");
    for r in rows {
        let e = r.mean_center_error.map_or("-".to_string(), |e| format!("{e:.4}"));
        s.push_str(&format!("{:.2} {:.2} {:.4} {e}\n", r.dist_bound, r.noise, r.ratio));
    }
    s
}

/// For each bound: train on `dataset`, then for each noise level refine
/// simulated detections of `eval_dataset` and measure the ratio. Models and
/// predictions are kept under `out`.
pub fn cmd_sweep_dist(cfg: &RunConfig, bounds: &[f64], noises: &[f64], out: &mut dyn Write) -> Result<Vec<SweepRow>> {
    if bounds.is_empty() {
        bail!("no dist bounds given");
    }
    if noises.is_empty() {
        bail!("no noise levels given");
    }
    let work = require(&cfg.out, "output", "--out")?;
    let eval_root = cfg.eval_dataset.clone().or_else(|| cfg.dataset.clone());
    fs::create_dir_all(work)?;
    let mut rows = Vec::new();
    for &b in bounds {
        let mut c = cfg.clone();
        c.dist_bound = b;
        c.checkpoint = Some(work.join(format!("model_{b:.2}.ckpt")));
        c.log = Some(work.join(format!("model_{b:.2}.loss.txt")));
        cmd_train(&c, false, out)?;
        for &n in noises {
            let mut r = c.clone();
            r.dataset = eval_root.clone();
            r.noise = n;
            r.predictions = Some(work.join(format!("pred_{b:.2}_{n:.2}")));
            let s = cmd_refine(&r, false, out)?;
            let report = evaluate_dirs(&r, require(&r.dataset, "dataset", "--dataset")?, r.predictions.as_deref().unwrap())?;
            rows.push(SweepRow {
                dist_bound: b,
                noise: n,
                ratio: report.get("ratio").unwrap_or(0.0),
                mean_center_error: s.mean_center_error,
            });
        }
    }
    let table = sweep_table(&rows);
    if let Some(p) = &cfg.report {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    write!(out, "{table}")?;
    Ok(rows)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub detections: usize,
    pub repetitions: usize,
    pub sampling_ms: f64,
    pub inference_ms: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "detections {}\nrepetitions {}\nsampling_ms {:.3}\ninference_ms {:.3}\n\
             reference: 6.5 ms sampling + 5.5 ms inference reported on a GPU (not comparable, not asserted)\n",
            self.detections, self.repetitions, self.sampling_ms, self.inference_ms
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times crop+resample and network inference over `count` detections of
/// one scene; medians over `reps` repetitions after one warmup pass.
pub fn bench(model: &EpbrmModel, cloud: &PointCloud, dets: &[Detection], reps: usize) -> BenchReport {
    let region = model.region();
    let n = model.config.n_points;
    let mut rng = detection_rng(0, 0);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<PointCloud> {
        dets.iter()
            .map(|d| {
                let idx = crop_indices(cloud, d.location, &region);
                match resample_indices(idx.len(), n, rng) {
                    Some(sel) => sel.into_iter().map(|k| cloud[idx[k]] - d.location).collect(),
                    None => PointCloud::default(),
                }
            })
            .collect()
    };
    let infer = |clouds: &[PointCloud], rng: &mut ChaCha8Rng| {
        for c in clouds.iter().filter(|c| !c.is_empty()) {
            let _ = std::hint::black_box(epbrm_forward(c, model, Membership::Sample(rng)));
        }
    };
    let warm = sample(&mut rng);
    infer(&warm, &mut rng);
    let (mut ts, mut ti) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let t = Instant::now();
        let clouds = std::hint::black_box(sample(&mut rng));
        ts.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        infer(&clouds, &mut rng);
        ti.push(t.elapsed().as_secs_f64() * 1e3);
    }
    BenchReport { detections: dets.len(), repetitions: reps, sampling_ms: median(ts), inference_ms: median(ti) }
}

/// Uses the first dataset scene with enough objects of the class, or a
/// synthetic scene when no dataset is given.
pub fn cmd_bench(cfg: &RunConfig, count: usize, reps: usize, out: &mut dyn Write) -> Result<BenchReport> {
    ensure!(count > 0 && reps > 0, "detections and repetitions must be positive");
    let ck = read_checkpoint(require(&cfg.checkpoint, "checkpoint", "--checkpoint")?)?;
    let class = ck.model.config.class;
    let scene = match &cfg.dataset {
        Some(root) => {
            let ids = dataset::scene_ids(root, cfg.split.as_deref())?;
            let mut found = None;
            for id in ids {
                let s = dataset::load_scene(root, &id)?.scene;
                if s.objects_of(class).count() >= count {
                    found = Some(s);
                    break;
                }
            }
            found.ok_or_else(|| anyhow!("no scene in {} has {count} {class} objects", root.display()))?
        }
        None => {
            let spec = SceneSpec { extent: 20.0 + 4.0 * count as f64, ..SceneSpec::new(class, count) };
            generate_scenes(&spec, 1, cfg.seed)?.remove(0)
        }
    };
    let dets: Vec<Detection> = scene
        .objects_of(class)
        .take(count)
        .map(|g| Detection { location: g.bbox.center, score: 1.0, bbox: None })
        .collect();
    let report = bench(&ck.model, &scene.cloud, &dets, reps);
    write!(out, "{}", report.to_text())?;
    Ok(report)
}

