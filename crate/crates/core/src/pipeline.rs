//! Cylinder cropping, fixed-size resampling, training-sample augmentation
//! and batch refinement of detections.

use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Box3D, Detection, Point3, PointCloud, Size3};
use crate::math::PI;
use crate::network::{epbrm_forward, BoxTarget, EpbrmModel, Membership, NetworkError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("crop around the object is empty")]
    EmptyCrop,
    #[error("cannot resample an empty cloud")]
    EmptyCloud,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(&'static str),
}

/// Vertical cylinder around a proposal. `z_min`/`z_max` are relative to the
/// proposal's z. The class constants measure the band from the ground
/// contact point; see [`crate::ObjectClass::sampling_region`] for the
/// center-relative form used on box centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRegion {
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl SamplingRegion {
    pub const CAR: SamplingRegion = SamplingRegion { radius: 2.4, z_min: -0.5, z_max: 2.5 };
    pub const PEDESTRIAN: SamplingRegion = SamplingRegion { radius: 0.35, z_min: -0.5, z_max: 2.5 };
    pub const CYCLIST: SamplingRegion = SamplingRegion { radius: 0.8, z_min: -0.5, z_max: 2.5 };

    /// Same cylinder with the vertical band moved down by `dz`.
    pub fn lowered(self, dz: f64) -> Self {
        SamplingRegion { z_min: self.z_min - dz, z_max: self.z_max - dz, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.radius > 0.0 && self.z_min < self.z_max && self.radius.is_finite()
    }

    #[inline]
    pub fn contains(&self, center: Point3, p: Point3) -> bool {
        let d = p - center;
        d.x * d.x + d.y * d.y <= self.radius * self.radius && d.z >= self.z_min && d.z <= self.z_max
    }
}

/// Indices of the points inside the region, in cloud order.
pub fn crop_indices(cloud: &PointCloud, center: Point3, region: &SamplingRegion) -> Vec<usize> {
    cloud
        .iter()
        .enumerate()
        .filter(|(_, p)| region.contains(center, **p))
        .map(|(i, _)| i)
        .collect()
}

pub fn crop_cylinder(cloud: &PointCloud, center: Point3, region: &SamplingRegion) -> PointCloud {
    cloud.iter().copied().filter(|p| region.contains(center, *p)).collect()
}

/// Picks `n` indices into a cloud of `count` points: identity when the
/// sizes agree, a sorted subset without replacement when there are more,
/// and every index followed by draws with replacement when there are fewer.
/// `None` for an empty cloud.
pub fn resample_indices(count: usize, n: usize, rng: &mut dyn RngCore) -> Option<Vec<usize>> {
    if count == 0 {
        return None;
    }
    if count == n {
        return Some((0..n).collect());
    }
    if count > n {
        let mut picked = index::sample(rng, count, n).into_vec();
        picked.sort_unstable();
        return Some(picked);
    }
    let mut out: Vec<usize> = (0..count).collect();
    out.extend((count..n).map(|_| rng.random_range(0..count)));
    Some(out)
}

pub fn resample_fixed(cloud: &PointCloud, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud, PipelineError> {
    let picks = resample_indices(cloud.len(), n, rng).ok_or(PipelineError::EmptyCloud)?;
    Ok(picks.into_iter().map(|i| cloud[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub dist_bound: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Jitter is drawn from `[-yaw_jitter, yaw_jitter]`.
    pub yaw_jitter: f64,
    pub n_points: usize,
    pub region: SamplingRegion,
}

impl AugmentConfig {
    pub fn new(dist_bound: f64, n_points: usize, region: SamplingRegion) -> Self {
        AugmentConfig { dist_bound, scale_min: 0.9, scale_max: 1.1, yaw_jitter: PI / 8.0, n_points, region }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.dist_bound > 0.0 && self.dist_bound.is_finite()) {
            return Err(PipelineError::InvalidConfig("dist_bound must be positive"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(PipelineError::InvalidConfig("scale interval"));
        }
        if !(self.yaw_jitter >= 0.0) {
            return Err(PipelineError::InvalidConfig("yaw jitter must be nonnegative"));
        }
        if self.n_points == 0 {
            return Err(PipelineError::InvalidConfig("n_points must be positive"));
        }
        if !self.region.is_valid() {
            return Err(PipelineError::InvalidConfig("sampling region"));
        }
        Ok(())
    }
}

/// Random draws of one training sample. `scale` multiplies the aligned
/// frame's x (width), y (length) and z (height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub scale: [f64; 3],
    pub yaw_jitter: f64,
    /// Displacement of the simulated proposal from the object center.
    pub offset: Point3,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { scale: [1.0; 3], yaw_jitter: 0.0, offset: Point3::ORIGIN };

    pub fn draw(cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Self {
        let mut s = || rng.random_range(cfg.scale_min..=cfg.scale_max);
        let scale = [s(), s(), s()];
        let yaw_jitter = rng.random_range(-cfg.yaw_jitter..=cfg.yaw_jitter);
        let b = cfg.dist_bound;
        let offset = Point3::new(rng.random_range(-b..=b), rng.random_range(-b..=b), rng.random_range(-b..=b));
        Augmentation { scale, yaw_jitter, offset }
    }

    /// The ground-truth box after the same transforms, in the sample frame.
    pub fn target(&self, gt: &Box3D) -> BoxTarget {
        let [sx, sy, sz] = self.scale;
        BoxTarget {
            center: -self.offset,
            yaw: gt.yaw + self.yaw_jitter,
            size: Size3::new(gt.size.h * sz, gt.size.w * sx, gt.size.l * sy),
        }
    }

    /// Maps a scene point into the sample frame.
    pub fn apply(&self, gt: &Box3D, p: Point3) -> Point3 {
        let [sx, sy, sz] = self.scale;
        let a = (p - gt.center).rotate_z(-gt.yaw);
        let s = Point3::new(a.x * sx, a.y * sy, a.z * sz);
        s.rotate_z(gt.yaw + self.yaw_jitter) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Exactly `n_points` points, origin at the simulated proposal.
    pub cloud: PointCloud,
    pub target: BoxTarget,
    pub augmentation: Augmentation,
}

/// Crops around the ground truth, aligns, scales, re-rotates with jitter and
/// displaces the proposal, then resamples to the configured size.
pub fn make_training_sample(
    scene: &PointCloud,
    gt: &Box3D,
    cfg: &AugmentConfig,
    rng: &mut dyn RngCore,
) -> Result<TrainingSample, PipelineError> {
    let crop = crop_cylinder(scene, gt.center, &cfg.region);
    if crop.is_empty() {
        return Err(PipelineError::EmptyCrop);
    }
    let aug = Augmentation::draw(cfg, rng);
    make_training_sample_with(&crop, gt, cfg, aug, rng)
}

/// Same as [`make_training_sample`] on an already cropped cloud with the
/// augmentation given.
pub fn make_training_sample_with(
    crop: &PointCloud,
    gt: &Box3D,
    cfg: &AugmentConfig,
    aug: Augmentation,
    rng: &mut dyn RngCore,
) -> Result<TrainingSample, PipelineError> {
    if crop.is_empty() {
        return Err(PipelineError::EmptyCrop);
    }
    let moved = crop.map(|p| aug.apply(gt, p));
    let cloud = resample_fixed(&moved, cfg.n_points, rng)?;
    Ok(TrainingSample { cloud, target: aug.target(gt), augmentation: aug })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Refined,
    EmptyCrop,
    /// A transformation stage pushed every point out of the region.
    StageFailed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub detection: Detection,
    pub status: RefineStatus,
}

/// Seed of the resampling stream for detection `index`.
pub fn detection_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Refines one detection. The score is kept; the box is absent unless the
/// status is [`RefineStatus::Refined`].
pub fn refine_one(det: &Detection, scene: &PointCloud, model: &EpbrmModel, rng: &mut dyn RngCore) -> Refined {
    let region = model.region();
    let local: PointCloud = scene
        .iter()
        .filter(|p| region.contains(det.location, **p))
        .map(|p| *p - det.location)
        .collect();
    let unrefined = Detection { bbox: None, ..*det };
    if local.is_empty() {
        return Refined { detection: unrefined, status: RefineStatus::EmptyCrop };
    }
    match epbrm_forward(&local, model, Membership::Sample(rng)) {
        Ok((pred, _)) => Refined {
            detection: Detection { bbox: Some(pred.bbox.translated(det.location)), ..*det },
            status: RefineStatus::Refined,
        },
        Err(NetworkError::StageExpelledPoints { stage }) => {
            Refined { detection: unrefined, status: RefineStatus::StageFailed(stage) }
        }
        Err(_) => Refined { detection: unrefined, status: RefineStatus::EmptyCrop },
    }
}

/// Refines every detection in order with per-detection streams of `seed`.
/// No suppression is applied.
pub fn refine(detections: &[Detection], scene: &PointCloud, model: &EpbrmModel, seed: u64) -> Vec<Refined> {
    detections
        .iter()
        .enumerate()
        .map(|(i, d)| refine_one(d, scene, model, &mut detection_rng(seed, i)))
        .collect()
}
