//! Datasets on disk in the KITTI layout:
//!
//! ```text
//! root/velodyne/<id>.bin
//! root/label/<id>.txt
//! root/calib/<id>.txt
//! ```
//!
//! Prediction directories hold one result file `<id>.txt` per scene.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use epbrm_core::{ObjectClass, PointCloud};

use crate::kitti::{self, Calibration, GroundTruth, PredictionEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub ground_truths: Vec<GroundTruth>,
}

impl Scene {
    pub fn objects_of(&self, class: ObjectClass) -> impl Iterator<Item = &GroundTruth> {
        self.ground_truths.iter().filter(move |g| g.class == class)
    }
}

/// A loaded scene with the calibration needed to write results back.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub scene: Scene,
    pub calib: Calibration,
}

fn velodyne_path(root: &Path, id: &str) -> PathBuf {
    root.join("velodyne").join(format!("{id}.bin"))
}

fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("label").join(format!("{id}.txt"))
}

fn calib_path(root: &Path, id: &str) -> PathBuf {
    root.join("calib").join(format!("{id}.txt"))
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

/// `true` when `dir` exists and holds at least one entry.
pub fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`, in which
/// case it is cleared first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if is_non_empty_dir(dir) {
        if !force {
            bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes scenes with the canonical calibration.
pub fn write_dataset(root: &Path, scenes: &[Scene]) -> Result<()> {
    for sub in ["velodyne", "label", "calib"] {
        fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
    }
    let calib = Calibration::CANONICAL;
    for s in scenes {
        kitti::write_velodyne(&velodyne_path(root, &s.id), &s.cloud)?;
        kitti::write_labels(&label_path(root, &s.id), &s.ground_truths, &calib)?;
        kitti::write_calib(&calib_path(root, &s.id), &calib)?;
    }
    Ok(())
}

/// Scene ids: the lines of `split` when given, otherwise every velodyne
/// file in sorted order.
pub fn scene_ids(root: &Path, split: Option<&Path>) -> Result<Vec<String>> {
    if let Some(split) = split {
        let text = fs::read_to_string(split).with_context(|| format!("reading split {}", split.display()))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let dir = root.join("velodyne");
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "bin").then(|| p.file_stem()?.to_str().map(String::from)).flatten()
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_scene(root: &Path, id: &str) -> Result<LoadedScene> {
    let calib = kitti::read_calib(&calib_path(root, id))?;
    let cloud = kitti::read_velodyne(&velodyne_path(root, id))?;
    let lp = label_path(root, id);
    let ground_truths = if lp.exists() { kitti::read_labels(&lp, &calib)? } else { Vec::new() };
    Ok(LoadedScene { scene: Scene { id: id.to_string(), cloud, ground_truths }, calib })
}

/// Loads the scenes in id order, in parallel.
pub fn load_dataset(root: &Path, split: Option<&Path>) -> Result<Vec<LoadedScene>> {
    use rayon::prelude::*;
    let ids = scene_ids(root, split)?;
    ids.par_iter().map(|id| load_scene(root, id)).collect()
}

/// Predictions of one scene; a missing file means no predictions.
pub fn load_predictions(dir: &Path, id: &str, calib: &Calibration) -> Result<Vec<PredictionEntry>> {
    let p = prediction_path(dir, id);
    if !p.exists() {
        return Ok(Vec::new());
    }
    Ok(kitti::read_predictions(&p, calib)?)
}
