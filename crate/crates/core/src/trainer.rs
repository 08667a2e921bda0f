//! Minibatch training on augmented samples.
//!
//! Every random choice of iteration `i` comes from streams keyed by
//! `(seed, i, slot)`, so a run resumed from a checkpoint at iteration `i`
//! continues exactly like an uninterrupted one, and batch members can be
//! computed in any order or in parallel. Gradients are summed in slot order.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Box3D, PointCloud};
use crate::network::{
    epbrm_backward, epbrm_forward, multitask_loss, EpbrmModel, LossBreakdown, LossWeights, Membership, ModelGrads,
    NetworkError, OptimizerKind, OptimizerState,
};
use crate::pipeline::{crop_cylinder, make_training_sample_with, AugmentConfig, Augmentation, TrainingSample};

/// A ground-truth object with the points of its sampling region.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainObject {
    pub crop: PointCloud,
    pub gt: Box3D,
}

impl TrainObject {
    /// `None` when the region around the box holds no points.
    pub fn from_scene(scene: &PointCloud, gt: Box3D, cfg: &AugmentConfig) -> Option<Self> {
        let crop = crop_cylinder(scene, gt.center, &cfg.region);
        (!crop.is_empty()).then_some(TrainObject { crop, gt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
}

/// Stream for one draw site of one iteration.
pub fn stream(seed: u64, iteration: u64, slot: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&slot.to_le_bytes());
    key[24..].copy_from_slice(b"epbrm-tr");
    ChaCha8Rng::from_seed(key)
}

const PICK_SLOT: u64 = u64::MAX;

/// Loss and parameter gradient of one sample.
pub fn sample_gradient(
    model: &EpbrmModel,
    sample: &TrainingSample,
    weights: &LossWeights,
    rng: &mut dyn RngCore,
) -> Result<(LossBreakdown, ModelGrads), NetworkError> {
    let (pred, cache) = epbrm_forward(&sample.cloud, model, Membership::Sample(rng))?;
    let (loss, d_pred) = multitask_loss(&pred, &sample.target, model, weights);
    let mut grads = model.zero_grads();
    epbrm_backward(model, &cache, &pred, &d_pred, &mut grads)?;
    Ok((loss, grads))
}

/// One batch member: which object, and which stream slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleJob {
    pub object: usize,
    pub slot: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    /// Mean over the samples that produced a gradient.
    pub loss: LossBreakdown,
    pub used: usize,
    pub skipped: usize,
}

pub type SampleOutcome = Option<(LossBreakdown, ModelGrads)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: EpbrmModel,
    pub optimizer: OptimizerState,
    pub config: TrainerConfig,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(model: EpbrmModel, config: TrainerConfig) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate, &shapes);
        Trainer { model, optimizer, config, iteration: 0 }
    }

    /// Batch members of the next iteration, drawn uniformly with replacement.
    pub fn plan(&self, pool_len: usize) -> Vec<SampleJob> {
        if pool_len == 0 {
            return Vec::new();
        }
        let mut rng = stream(self.config.seed, self.iteration, PICK_SLOT);
        (0..self.config.batch as u64)
            .map(|slot| SampleJob { object: rng.random_range(0..pool_len), slot })
            .collect()
    }

    /// Builds and differentiates one planned sample. `None` when the sample
    /// cannot be used (a stage expelled every point).
    pub fn run_job(&self, pool: &[TrainObject], job: SampleJob) -> SampleOutcome {
        let obj = &pool[job.object];
        let mut rng = stream(self.config.seed, self.iteration, job.slot);
        let aug = Augmentation::draw(&self.config.augment, &mut rng);
        let sample = make_training_sample_with(&obj.crop, &obj.gt, &self.config.augment, aug, &mut rng).ok()?;
        sample_gradient(&self.model, &sample, &self.config.weights, &mut rng).ok()
    }

    /// Averages the outcomes in order, takes an optimizer step and rounds
    /// the parameters to `f32`.
    pub fn apply(&mut self, outcomes: Vec<SampleOutcome>) -> StepReport {
        let mut loss = LossBreakdown::default();
        let mut sum: Option<ModelGrads> = None;
        let mut used = 0;
        let skipped = outcomes.iter().filter(|o| o.is_none()).count();
        for (l, g) in outcomes.into_iter().flatten() {
            used += 1;
            loss.add_scaled(&l, 1.0);
            match &mut sum {
                Some(s) => s.add_scaled(&g, 1.0),
                None => sum = Some(g),
            }
        }
        if let Some(sum) = sum {
            let k = 1.0 / used as f64;
            let mut mean = self.model.zero_grads();
            mean.add_scaled(&sum, k);
            loss = scaled(&loss, k);
            let grads = mean.tensors();
            let mut params = self.model.tensors_mut();
            self.optimizer.step(&mut params, &grads).expect("optimizer state mirrors the model");
            self.model.quantize_f32();
        }
        self.iteration += 1;
        StepReport { iteration: self.iteration, loss, used, skipped }
    }

    /// One sequential iteration over the pool.
    pub fn step(&mut self, pool: &[TrainObject]) -> StepReport {
        let outcomes = self.plan(pool.len()).into_iter().map(|j| self.run_job(pool, j)).collect();
        self.apply(outcomes)
    }

    /// One iteration on a fixed set of prepared samples; stage resampling
    /// uses the same streams every iteration.
    pub fn step_fixed(&mut self, samples: &[TrainingSample]) -> StepReport {
        let outcomes = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = stream(self.config.seed, 0, i as u64);
                sample_gradient(&self.model, s, &self.config.weights, &mut rng).ok()
            })
            .collect();
        self.apply(outcomes)
    }
}

fn scaled(l: &LossBreakdown, k: f64) -> LossBreakdown {
    let mut out = LossBreakdown { loc_center: l.loc_center.map(|_| 0.0), ..LossBreakdown::default() };
    out.add_scaled(l, k);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Size3};
    use crate::network::{Mechanism, ModelConfig};
    use crate::ObjectClass;
    use alloc::vec;

    fn setup(mechanisms: Vec<Mechanism>) -> (Trainer, Vec<TrainObject>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = ModelConfig::new(ObjectClass::Car);
        cfg.mechanisms = mechanisms;
        cfg.point_widths = vec![16, 32];
        cfg.head_widths = vec![32];
        cfg.n_points = 48;
        let model = EpbrmModel::new(cfg, &mut rng).unwrap();
        let augment = AugmentConfig::new(0.15, 48, ObjectClass::Car.sampling_region());
        let config = TrainerConfig {
            batch: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::ADAM,
            seed: 17,
            weights: LossWeights::default(),
            augment,
        };
        let pool = (0..6)
            .map(|i| {
                let gt = Box3D::new(Point3::new(5.0 * i as f64, 3.0, 0.7), Size3::new(1.5, 1.6, 3.8), 0.4 * i as f64)
                    .unwrap();
                let cloud: PointCloud = (0..200)
                    .map(|_| {
                        let q = Point3::new(
                            rng.random_range(-0.8..0.8),
                            rng.random_range(-1.9..1.9),
                            rng.random_range(-0.75..0.75),
                        );
                        q.rotate_z(gt.yaw) + gt.center
                    })
                    .collect();
                TrainObject::from_scene(&cloud, gt, &augment).unwrap()
            })
            .collect();
        (Trainer::new(model, config), pool)
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (mut a, pool) = setup(vec![Mechanism::Centering]);
        let mut b = a.clone();
        for _ in 0..3 {
            a.step(&pool);
        }
        for _ in 0..2 {
            b.step(&pool);
        }
        let mut c = b.clone();
        let rb = b.step(&pool);
        let rc = c.step(&pool);
        assert_eq!(rb, rc);
        assert_eq!(a, b);
        assert_eq!(a.iteration, 3);
    }

    #[test]
    fn parameters_stay_f32_exact() {
        let (mut t, pool) = setup(vec![]);
        t.step(&pool);
        for ten in t.model.tensors() {
            assert!(ten.iter().all(|v| *v == *v as f32 as f64));
        }
    }

    #[test]
    fn loss_columns_follow_mechanisms() {
        let (mut t, pool) = setup(vec![Mechanism::Centering]);
        assert!(t.step(&pool).loss.loc_center.is_some());
        let (mut t, pool) = setup(vec![Mechanism::Translation]);
        assert!(t.step(&pool).loss.loc_center.is_none());
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = stream(1, 2, 3);
        let mut b = stream(1, 2, 4);
        let mut c = stream(1, 2, 3);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_eq!(x, c.next_u64());
    }
}
