//! Command-line parsing. Settings are layered: defaults, then `--config`,
//! then `--set key=value` pairs, then the dedicated flags.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use epbrm_core::evaluator::Difficulty;
use epbrm_core::network::Mechanism;
use epbrm_core::ObjectClass;

use crate::commands;
use crate::config::{parse_mechanisms, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "epbrm", version, about = "Box regression refinement for 3D object proposals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub class: Option<ObjectClass>,
    #[arg(long, global = true)]
    pub dist_bound: Option<f64>,
    /// Comma-separated: translation, centering, rotation, scaling, or none.
    #[arg(long, global = true, value_parser = mechanisms_arg)]
    pub mechanisms: Option<Mechanisms>,
    #[arg(long, global = true)]
    pub iters: Option<u64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Prediction directory (one result file per scene).
    #[arg(long, global = true)]
    pub pred: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scene id list; defaults to every scene of the dataset.
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mechanisms(pub Vec<Mechanism>);

fn mechanisms_arg(s: &str) -> Result<Mechanisms, String> {
    parse_mechanisms(s).map(Mechanisms).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset in the KITTI layout to --out.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Train a model on --dataset, writing --checkpoint and a loss log.
    Train {
        /// Continue from --checkpoint when it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Loss log path; defaults next to the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Refine detections of --dataset scenes into --pred.
    Refine {
        /// Result-file directory with input detections; simulated when absent.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Simulated localizer: uniform center-noise half-width in meters.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        fn_rate: Option<f64>,
        #[arg(long)]
        fp_rate: Option<f64>,
        /// Write the plain proposal boxes instead of refining.
        #[arg(long)]
        unrefined: bool,
    },
    /// Evaluate --pred against the labels of --dataset.
    Eval {
        #[arg(long)]
        level: Option<Difficulty>,
        /// IoU threshold; defaults to the class threshold.
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Train one model per bound and measure the ratio per noise level.
    SweepDist {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        bounds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.15")]
        noises: Vec<f64>,
        /// Held-out dataset for evaluation; defaults to --dataset.
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
    },
    /// Time sampling and inference for one scene's detections.
    Bench {
        #[arg(long, default_value_t = 20)]
        detections: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

impl Cli {
    /// The effective run configuration.
    pub fn run_config(&self) -> Result<RunConfig> {
        let c = &self.common;
        let mut cfg = RunConfig::default();
        if let Some(p) = &c.config {
            cfg.apply_file(p)?;
        }
        for kv in &c.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        macro_rules! over {
            ($($field:ident <- $value:expr),* $(,)?) => {$(
                if let Some(v) = $value.clone() { cfg.$field = v; }
            )*};
        }
        over!(
            class <- c.class, dist_bound <- c.dist_bound, iters <- c.iters,
            batch <- c.batch, lr <- c.lr, seed <- c.seed, threads <- c.threads,
        );
        if let Some(m) = &c.mechanisms {
            cfg.mechanisms = m.0.clone();
        }
        if c.dataset.is_some() {
            cfg.dataset = c.dataset.clone();
        }
        if c.checkpoint.is_some() {
            cfg.checkpoint = c.checkpoint.clone();
        }
        if c.pred.is_some() {
            cfg.predictions = c.pred.clone();
        }
        if c.report.is_some() {
            cfg.report = c.report.clone();
        }
        if c.out.is_some() {
            cfg.out = c.out.clone();
        }
        if c.split.is_some() {
            cfg.split = c.split.clone();
        }
        match &self.command {
            Command::Synth { scenes, objects } => {
                over!(scenes <- scenes, objects <- objects);
            }
            Command::Train { checkpoint_every, log, .. } => {
                over!(checkpoint_every <- checkpoint_every);
                if log.is_some() {
                    cfg.log = log.clone();
                }
            }
            Command::Refine { detections, noise, fn_rate, fp_rate, .. } => {
                over!(noise <- noise, fn_rate <- fn_rate, fp_rate <- fp_rate);
                if detections.is_some() {
                    cfg.detections = detections.clone();
                }
            }
            Command::Eval { level, iou } => {
                over!(level <- level);
                if iou.is_some() {
                    cfg.iou_threshold = *iou;
                }
            }
            Command::SweepDist { eval_dataset, .. } => {
                if eval_dataset.is_some() {
                    cfg.eval_dataset = eval_dataset.clone();
                }
            }
            Command::Bench { .. } => {}
        }
        Ok(cfg)
    }

    pub fn run(&self, out: &mut dyn Write) -> Result<()> {
        let cfg = self.run_config()?;
        if cfg.threads > 0 {
            // a second call in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
        }
        match &self.command {
            Command::Synth { .. } => commands::cmd_synth(&cfg, self.common.force, out).map(drop),
            Command::Train { resume, .. } => commands::cmd_train(&cfg, *resume, out).map(drop),
            Command::Refine { unrefined, .. } => commands::cmd_refine(&cfg, *unrefined, out).map(drop),
            Command::Eval { .. } => commands::cmd_eval(&cfg, out).map(drop),
            Command::SweepDist { bounds, noises, .. } => commands::cmd_sweep_dist(&cfg, bounds, noises, out).map(drop),
            Command::Bench { detections, reps } => commands::cmd_bench(&cfg, *detections, *reps, out).map(drop),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("epbrm").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "class = cyclist\ndist_bound = 0.3\nbatch = 16\n").unwrap();
        let cli = parse(&["train", "--config", p.to_str().unwrap(), "--dist-bound", "0.6", "--mechanisms", "translation,rotation"]).unwrap();
        let cfg = cli.run_config().unwrap();
        assert_eq!(cfg.class, ObjectClass::Cyclist);
        assert_eq!(cfg.dist_bound, 0.6);
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.mechanisms, vec![Mechanism::Translation, Mechanism::Rotation]);
    }

    #[test]
    fn usage_errors() {
        assert!(parse(&["synth", "--class", "truck"]).is_err());
        assert!(parse(&["sweep-dist"]).is_err());
        assert!(parse(&["train", "--mechanisms", "warp"]).is_err());
        assert!(parse(&["eval", "--level", "medium"]).is_err());
    }
}
