//! Run configuration: defaults, then a flat `key = value` file, then
//! command-line overrides.
//!
//! ```text
//! # comment
//! class = car
//! dist_bound = 0.15
//! mechanisms = centering
//! point_widths = 64,128,256
//! ```
//!
//! Keys use the field names of [`RunConfig`]. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use epbrm_core::evaluator::{Difficulty, Interpolation};
use epbrm_core::network::{Mechanism, ModelConfig, OptimizerKind};
use epbrm_core::ObjectClass;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub class: ObjectClass,
    pub dist_bound: f64,
    pub mechanisms: Vec<Mechanism>,
    pub rotation_bins: usize,
    pub n_points: usize,
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub iters: u64,
    pub seed: u64,
    /// 0 means all available cores.
    pub threads: usize,
    pub checkpoint_every: u64,
    // synthetic data
    pub scenes: usize,
    pub objects: usize,
    // simulated localizer
    pub noise: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    // evaluation
    pub level: Difficulty,
    pub interpolation: Interpolation,
    pub iou_threshold: Option<f64>,
    // paths
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(ObjectClass::Car);
        RunConfig {
            class: ObjectClass::Car,
            dist_bound: 0.15,
            mechanisms: vec![Mechanism::Centering],
            rotation_bins: m.rotation_bins,
            n_points: m.n_points,
            point_widths: m.point_widths,
            head_widths: m.head_widths,
            batch: 64,
            lr: 5e-4,
            optimizer: OptimizerKind::ADAM,
            iters: 10_000,
            seed: 0,
            threads: 0,
            checkpoint_every: 1000,
            scenes: 100,
            objects: 8,
            noise: 0.15,
            fn_rate: 0.0,
            fp_rate: 0.0,
            level: Difficulty::All,
            interpolation: Interpolation::FortyPoint,
            iou_threshold: None,
            dataset: None,
            eval_dataset: None,
            split: None,
            checkpoint: None,
            detections: None,
            predictions: None,
            report: None,
            log: None,
            out: None,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{s:?}: {e}")))
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{v:?}: {e}"))
}

pub fn parse_mechanisms(v: &str) -> Result<Vec<Mechanism>> {
    list(v)
}

fn parse_optimizer(v: &str) -> Result<OptimizerKind> {
    match v {
        "adam" => Ok(OptimizerKind::ADAM),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => bail!("unknown optimizer {v:?} (adam or sgd)"),
    }
}

fn parse_interpolation(v: &str) -> Result<Interpolation> {
    match v {
        "40" | "forty" => Ok(Interpolation::FortyPoint),
        "11" | "eleven" => Ok(Interpolation::ElevenPoint),
        _ => bail!("unknown interpolation {v:?} (40 or 11)"),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match key.trim() {
            "class" => self.class = v.parse().map_err(|e| anyhow!("{e}"))?,
            "dist_bound" => self.dist_bound = num(v)?,
            "mechanisms" => self.mechanisms = parse_mechanisms(v)?,
            "rotation_bins" => self.rotation_bins = num(v)?,
            "n_points" => self.n_points = num(v)?,
            "point_widths" => self.point_widths = list(v)?,
            "head_widths" => self.head_widths = list(v)?,
            "batch" => self.batch = num(v)?,
            "lr" => self.lr = num(v)?,
            "optimizer" => self.optimizer = parse_optimizer(v)?,
            "iters" => self.iters = num(v)?,
            "seed" => self.seed = num(v)?,
            "threads" => self.threads = num(v)?,
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            "scenes" => self.scenes = num(v)?,
            "objects" => self.objects = num(v)?,
            "noise" => self.noise = num(v)?,
            "fn_rate" => self.fn_rate = num(v)?,
            "fp_rate" => self.fp_rate = num(v)?,
            "level" => self.level = v.parse().map_err(|e| anyhow!("{e}"))?,
            "interpolation" => self.interpolation = parse_interpolation(v)?,
            "iou_threshold" => self.iou_threshold = Some(num(v)?),
            "dataset" => self.dataset = path(),
            "eval_dataset" => self.eval_dataset = path(),
            "split" => self.split = path(),
            "checkpoint" => self.checkpoint = path(),
            "detections" => self.detections = path(),
            "predictions" => self.predictions = path(),
            "report" => self.report = path(),
            "log" => self.log = path(),
            "out" => self.out = path(),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies every setting of a config text; errors carry line numbers.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            class: self.class,
            dist_bound: self.dist_bound,
            mechanisms: self.mechanisms.clone(),
            rotation_bins: self.rotation_bins,
            n_points: self.n_points,
            point_widths: self.point_widths.clone(),
            head_widths: self.head_widths.clone(),
        }
    }

    pub fn iou_threshold(&self) -> f64 {
        self.iou_threshold.unwrap_or(self.class.iou_threshold())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate().map_err(|e| anyhow!("{e}"))?;
        if self.batch == 0 {
            bail!("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("lr must be positive");
        }
        if let Some(t) = self.iou_threshold {
            if !(t > 0.0 && t <= 1.0) {
                bail!("iou_threshold must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// The settings as a config text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            if v.is_empty() {
                "none".into()
            } else {
                v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
            }
        }
        let mut lines = vec![
            format!("class = {}", self.class),
            format!("dist_bound = {}", self.dist_bound),
            format!("mechanisms = {}", join(&self.mechanisms)),
            format!("rotation_bins = {}", self.rotation_bins),
            format!("n_points = {}", self.n_points),
            format!("point_widths = {}", join(&self.point_widths)),
            format!("head_widths = {}", join(&self.head_widths)),
            format!("batch = {}", self.batch),
            format!("lr = {}", self.lr),
            format!("optimizer = {}", if matches!(self.optimizer, OptimizerKind::Sgd) { "sgd" } else { "adam" }),
            format!("iters = {}", self.iters),
            format!("seed = {}", self.seed),
        ];
        lines.push(String::new());
        lines.join("\n")
    }
}
