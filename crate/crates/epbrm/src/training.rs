//! Parallel driver around the core trainer.

use rayon::prelude::*;

use epbrm_core::pipeline::AugmentConfig;
use epbrm_core::trainer::{StepReport, TrainObject, Trainer};
use epbrm_core::ObjectClass;

use crate::dataset::Scene;

/// Training objects of one class; objects with an empty region are dropped.
pub fn training_pool<'a>(scenes: impl IntoIterator<Item = &'a Scene>, class: ObjectClass, cfg: &AugmentConfig) -> Vec<TrainObject> {
    scenes
        .into_iter()
        .flat_map(|s| s.objects_of(class).filter_map(|g| TrainObject::from_scene(&s.cloud, g.bbox, cfg)))
        .collect()
}

/// One iteration with batch members computed in parallel; the result does
/// not depend on the thread count.
pub fn parallel_step(trainer: &mut Trainer, pool: &[TrainObject]) -> StepReport {
    let jobs = trainer.plan(pool.len());
    let t: &Trainer = trainer;
    let outcomes = jobs.into_par_iter().map(|j| t.run_job(pool, j)).collect();
    trainer.apply(outcomes)
}
