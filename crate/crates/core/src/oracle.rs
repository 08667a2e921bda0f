//! Independent reference computations used by the test suites: central
//! finite differences for the hand-written gradients and Monte-Carlo volume
//! estimates for the rotated-box IoU.
//!
//! Gradient errors are `|analytic - numeric| / max(|analytic|, |numeric|)`
//! over the whole concatenated gradient vector.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::ObjectClass;
use crate::geometry::{Box3D, Point3, PointCloud, Size3};
use crate::network::{
    block_backward, block_forward, epbrm_backward, epbrm_forward, multitask_loss, BlockParams, BoxTarget,
    EpbrmModel, LossWeights, Mechanism, Membership, ModelConfig,
};

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_cloud(rng: &mut dyn RngCore, n: usize, half: [f64; 3]) -> PointCloud {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-half[0]..half[0]),
                rng.random_range(-half[1]..half[1]),
                rng.random_range(-half[2]..half[2]),
            )
        })
        .collect()
}

/// Result of one check: parameter and input errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckResult {
    pub params: f64,
    pub input: f64,
}

impl CheckResult {
    pub fn worst(&self) -> f64 {
        self.params.max(self.input)
    }
}

/// Checks one block on a random `(params, cloud, d_output)` triple. `None`
/// when some probe crosses a max-pool or ReLU switch, where central
/// differences do not estimate the derivative.
pub fn check_block(seed: u64, n_points: usize, step: f64) -> Option<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BlockParams::new(&[8, 16], &[12], 5, &mut rng);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let cloud = random_cloud(&mut rng, n_points, [1.0, 1.0, 1.0]);
    let d_out: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = block_forward(&cloud, &params).expect("nonempty cloud");
    let mut smooth = true;
    let mut objective = |p: &BlockParams, c: &PointCloud| {
        let (out, probe) = block_forward(c, p).expect("nonempty cloud");
        smooth &= probe.same_regime(&cache);
        out.iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>()
    };

    let (grads, d_cloud) = block_backward(&cache, &params, &d_out).expect("matching cache");

    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = params.clone();
    let count = probe.tensors().len();
    for ti in 0..count {
        for i in 0..probe.tensors()[ti].len() {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + step;
            let plus = objective(&probe, &cloud);
            probe.tensors_mut()[ti][i] = orig - step;
            let minus = objective(&probe, &cloud);
            probe.tensors_mut()[ti][i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let analytic_in: Vec<f64> = d_cloud.iter().flat_map(|p| p.to_array()).collect();
    let mut numeric_in = Vec::with_capacity(analytic_in.len());
    let mut moved = cloud.clone();
    for j in 0..cloud.len() {
        for axis in 0..3 {
            let orig = cloud.points[j].to_array();
            let mut a = orig;
            a[axis] += step;
            moved.points[j] = Point3::from_array(a);
            let plus = objective(&params, &moved);
            a[axis] = orig[axis] - step;
            moved.points[j] = Point3::from_array(a);
            let minus = objective(&params, &moved);
            moved.points[j] = cloud.points[j];
            numeric_in.push((plus - minus) / (2.0 * step));
        }
    }
    smooth.then(|| CheckResult {
        params: relative_error(&analytic, &numeric),
        input: relative_error(&analytic_in, &numeric_in),
    })
}

/// Checks the loss gradient of a whole model with the given stages. Point
/// selections of the unperturbed pass are replayed for every probe. `None`
/// when a probe crosses a max-pool or ReLU switch, as in [`check_block`].
pub fn check_model(mechanisms: &[Mechanism], seed: u64, n_points: usize, step: f64) -> Option<f64> {
    let (analytic, numeric, smooth) = model_gradients(mechanisms, seed, n_points, step);
    smooth.then(|| relative_error(&analytic, &numeric))
}

/// Fresh models have all-zero biases, which puts some ReLU inputs exactly on
/// the kink; random biases move the check to a generic point.
fn jitter_biases(model: &mut EpbrmModel, rng: &mut dyn RngCore) {
    let blocks = model.stages.iter_mut().map(|(_, b)| b).chain(core::iter::once(&mut model.head));
    for b in blocks {
        for l in b.point_layers.iter_mut().chain(b.head_layers.iter_mut()) {
            for v in l.bias.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

/// Analytic and numeric loss gradients, flattened in tensor order, and
/// whether every probe stayed in the regime of the unperturbed pass.
pub fn model_gradients(
    mechanisms: &[Mechanism],
    seed: u64,
    n_points: usize,
    step: f64,
) -> (Vec<f64>, Vec<f64>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(ObjectClass::Car);
    cfg.mechanisms = mechanisms.to_vec();
    cfg.n_points = n_points;
    cfg.point_widths = alloc::vec![8, 16];
    cfg.head_widths = alloc::vec![12];
    let mut model = EpbrmModel::new(cfg, &mut rng).expect("valid config");
    jitter_biases(&mut model, &mut rng);

    let yaw = rng.random_range(0.0..core::f64::consts::PI);
    let size = Size3::new(rng.random_range(1.3..1.7), rng.random_range(1.4..1.8), rng.random_range(3.3..4.3));
    let center = Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let target = BoxTarget { center, yaw, size };
    let cloud: PointCloud = random_cloud(&mut rng, n_points + 8, [0.5 * size.w, 0.5 * size.l, 0.5 * size.h])
        .iter()
        .map(|p| p.rotate_z(yaw) + center)
        .collect();
    let weights = LossWeights::default();

    let (pred, cache) = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).expect("points stay in region");
    let (_, d_pred) = multitask_loss(&pred, &target, &model, &weights);
    let mut grads = model.zero_grads();
    epbrm_backward(&model, &cache, &pred, &d_pred, &mut grads).expect("matching cache");
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let selections = cache.selections.clone();
    let mut smooth = true;
    let mut loss = |m: &EpbrmModel| {
        let (p, probe) = epbrm_forward(&cloud, m, Membership::Replay(&selections)).expect("replay");
        smooth &= probe.same_regime(&cache);
        multitask_loss(&p, &target, m, &weights).0.total
    };
    let mut probe = model.clone();
    let count = probe.tensors().len();
    let mut numeric = Vec::with_capacity(analytic.len());
    for ti in 0..count {
        for i in 0..probe.tensors()[ti].len() {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + step;
            let plus = loss(&probe);
            probe.tensors_mut()[ti][i] = orig - step;
            let minus = loss(&probe);
            probe.tensors_mut()[ti][i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    (analytic, numeric, smooth)
}

/// IoU of two boxes estimated from `samples` uniform draws inside `a`.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut dyn RngCore) -> f64 {
    let (sa, ca) = (libm::sin(a.yaw), libm::cos(a.yaw));
    let (sb, cb) = (libm::sin(b.yaw), libm::cos(b.yaw));
    let half_a = [0.5 * a.size.w, 0.5 * a.size.l, 0.5 * a.size.h];
    let half_b = [0.5 * b.size.w, 0.5 * b.size.l, 0.5 * b.size.h];
    let mut inside = 0usize;
    for _ in 0..samples {
        let u = rng.random_range(-half_a[0]..half_a[0]);
        let v = rng.random_range(-half_a[1]..half_a[1]);
        let z = a.center.z + rng.random_range(-half_a[2]..half_a[2]);
        // box frame -> world: heading (sin, cos) is the local y axis
        let x = a.center.x + u * ca + v * sa;
        let y = a.center.y - u * sa + v * ca;
        let (dx, dy) = (x - b.center.x, y - b.center.y);
        let bu = dx * cb - dy * sb;
        let bv = dx * sb + dy * cb;
        if bu.abs() <= half_b[0] && bv.abs() <= half_b[1] && (z - b.center.z).abs() <= half_b[2] {
            inside += 1;
        }
    }
    let inter = inside as f64 / samples as f64 * a.volume();
    inter / (a.volume() + b.volume() - inter)
}
