//! The PointNet-style building block, the stacked refinement model, the
//! multi-task loss and the optimizers.
//!
//! A block is a per-point MLP, a max-pool over points and a head MLP. All
//! layers use ReLU except the last head layer, which is linear. Gradients are
//! written out by hand; the backward pass only visits the points that won at
//! least one max-pool feature, since every other point receives no gradient.

mod loss;
mod model;
mod optim;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::geometry::{Point3, PointCloud};

pub use loss::{huber, huber_grad, multitask_loss, BoxTarget, LossBreakdown, LossWeights};
pub use model::{
    epbrm_backward, epbrm_forward, EpbrmModel, ForwardCache, Mechanism, Membership, ModelConfig, ModelGrads,
    Prediction, PredictionGrad, StageParams,
};
pub use optim::{OptimizerKind, OptimizerState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetworkError {
    #[error("cannot max-pool an empty point cloud")]
    EmptyCloud,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("stage {stage} re-crop left no points")]
    StageExpelledPoints { stage: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Fully connected layer; `weight` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Glorot-uniform weights, zero biases. Values are rounded to `f32` so
    /// checkpoints store them exactly.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit) as f32 as f64)
            .collect();
        Dense { inputs, outputs, weight, bias: vec![0.0; outputs] }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Parameters of one building block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub point_layers: Vec<Dense>,
    pub head_layers: Vec<Dense>,
}

impl BlockParams {
    /// Per-point widths `point_widths` (first input is 3), head hidden widths
    /// `head_widths`, and a final linear layer with `outputs` units.
    pub fn new(point_widths: &[usize], head_widths: &[usize], outputs: usize, rng: &mut dyn RngCore) -> Self {
        assert!(!point_widths.is_empty(), "a block needs at least one per-point layer");
        let mut point_layers = Vec::with_capacity(point_widths.len());
        let mut fan_in = 3;
        for &w in point_widths {
            point_layers.push(Dense::glorot(fan_in, w, rng));
            fan_in = w;
        }
        let mut head_layers = Vec::with_capacity(head_widths.len() + 1);
        for &w in head_widths.iter().chain(core::iter::once(&outputs)) {
            head_layers.push(Dense::glorot(fan_in, w, rng));
            fan_in = w;
        }
        BlockParams { point_layers, head_layers }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |layers: &[Dense]| layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        BlockParams { point_layers: z(&self.point_layers), head_layers: z(&self.head_layers) }
    }

    pub fn output_width(&self) -> usize {
        self.head_layers.last().map_or(0, |l| l.outputs)
    }

    pub fn pooled_width(&self) -> usize {
        self.point_layers.last().map_or(0, |l| l.outputs)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers.iter().chain(self.head_layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers.iter_mut().chain(self.head_layers.iter_mut())
    }

    /// Weight then bias of every layer, per-point layers first.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Checks that the layer widths chain and start from 3 inputs.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.point_layers.is_empty() || self.head_layers.is_empty() {
            return Err(NetworkError::ShapeMismatch("block needs per-point and head layers"));
        }
        let mut fan_in = 3;
        for l in self.layers() {
            if l.inputs != fan_in || l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(NetworkError::ShapeMismatch("layer widths do not chain"));
            }
            fan_in = l.outputs;
        }
        Ok(())
    }

    fn same_shape(&self, other: &BlockParams) -> bool {
        self.point_layers.len() == other.point_layers.len()
            && self.head_layers.len() == other.head_layers.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &BlockParams, k: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }
}

/// Intermediate values of [`block_forward`] needed by [`block_backward`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    n: usize,
    /// `point_acts[0]` is the `N x 3` input; `point_acts[k + 1]` the ReLU
    /// output of per-point layer `k`.
    point_acts: Vec<Vec<f64>>,
    /// Winning point of every pooled feature.
    argmax: Vec<usize>,
    /// `head_acts[0]` is the pooled vector; `head_acts[k + 1]` the output of
    /// head layer `k`.
    head_acts: Vec<Vec<f64>>,
}

impl BlockCache {
    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    /// True when both passes took the same max-pool winners and the same
    /// ReLU branches on every path to the output, so the block is one
    /// smooth map between them.
    pub fn same_regime(&self, other: &BlockCache) -> bool {
        if self.n != other.n || self.argmax != other.argmax {
            return false;
        }
        let mut rows = self.argmax.clone();
        rows.sort_unstable();
        rows.dedup();
        let point_ok = self.point_acts[1..].iter().zip(&other.point_acts[1..]).all(|(a, b)| {
            let w = a.len() / self.n;
            rows.iter().all(|&i| (i * w..(i + 1) * w).all(|j| (a[j] > 0.0) == (b[j] > 0.0)))
        });
        let hidden = 1..self.head_acts.len() - 1;
        let head_ok = self.head_acts[hidden.clone()]
            .iter()
            .zip(&other.head_acts[hidden])
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0)));
        point_ok && head_ok
    }

    pub fn output(&self) -> &[f64] {
        self.head_acts.last().map_or(&[], |v| v.as_slice())
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller's stride/shape combinations address elements
    // within `a`, `b` and `c`; `c` is `m x n` row-major and exclusively
    // borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Runs one block on a cloud. Output = head MLP(max over points of the
/// per-point MLP).
pub fn block_forward(cloud: &PointCloud, params: &BlockParams) -> Result<(Vec<f64>, BlockCache), NetworkError> {
    let n = cloud.len();
    if n == 0 {
        return Err(NetworkError::EmptyCloud);
    }
    params.validate()?;
    let mut point_acts = Vec::with_capacity(params.point_layers.len() + 1);
    point_acts.push(cloud.to_flat());
    for layer in &params.point_layers {
        let x = point_acts.last().expect("input pushed above");
        let mut y = vec![0.0; n * layer.outputs];
        // Y = X W^T, with W^T addressed through strides.
        gemm(
            n,
            layer.inputs,
            layer.outputs,
            x,
            layer.inputs as isize,
            1,
            &layer.weight,
            1,
            layer.inputs as isize,
            &mut y,
            false,
        );
        for row in y.chunks_exact_mut(layer.outputs) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v = relu(*v + b);
            }
        }
        point_acts.push(y);
    }

    let width = params.pooled_width();
    let last = point_acts.last().expect("at least one layer");
    let mut pooled = last[..width].to_vec();
    let mut argmax = vec![0usize; width];
    for (i, row) in last.chunks_exact(width).enumerate().skip(1) {
        for f in 0..width {
            if row[f] > pooled[f] {
                pooled[f] = row[f];
                argmax[f] = i;
            }
        }
    }

    let mut head_acts = Vec::with_capacity(params.head_layers.len() + 1);
    head_acts.push(pooled);
    let last_idx = params.head_layers.len() - 1;
    for (k, layer) in params.head_layers.iter().enumerate() {
        let mut y = vec![0.0; layer.outputs];
        layer.matvec(head_acts.last().expect("pooled pushed above"), &mut y);
        if k != last_idx {
            y.iter_mut().for_each(|v| *v = relu(*v));
        }
        head_acts.push(y);
    }
    let out = head_acts.last().expect("head has layers").clone();
    Ok((out, BlockCache { n, point_acts, argmax, head_acts }))
}

/// Accumulates the gradients of `<d_output, block(cloud)>` into `grads` and,
/// when `want_input` is set, returns the gradient with respect to the input
/// coordinates (row-major `N x 3`).
pub fn block_backward_into(
    cache: &BlockCache,
    params: &BlockParams,
    d_output: &[f64],
    grads: &mut BlockParams,
    want_input: bool,
) -> Result<Option<Vec<f64>>, NetworkError> {
    if d_output.len() != params.output_width() {
        return Err(NetworkError::ShapeMismatch("d_output width differs from block output"));
    }
    if !params.same_shape(grads) || cache.head_acts.len() != params.head_layers.len() + 1 {
        return Err(NetworkError::ShapeMismatch("gradient buffer or cache does not match block"));
    }

    // Head MLP, last layer linear.
    let mut d_act = d_output.to_vec();
    let last_idx = params.head_layers.len() - 1;
    for k in (0..params.head_layers.len()).rev() {
        let layer = &params.head_layers[k];
        let out = &cache.head_acts[k + 1];
        let input = &cache.head_acts[k];
        let dz: Vec<f64> = if k == last_idx {
            d_act
        } else {
            d_act.iter().zip(out).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect()
        };
        let g = &mut grads.head_layers[k];
        for (o, &dzo) in dz.iter().enumerate() {
            if dzo == 0.0 {
                continue;
            }
            g.bias[o] += dzo;
            let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
            for (w, x) in row.iter_mut().zip(input) {
                *w += dzo * x;
            }
        }
        let mut d_in = vec![0.0; layer.inputs];
        for (o, &dzo) in dz.iter().enumerate() {
            if dzo == 0.0 {
                continue;
            }
            let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            for (d, w) in d_in.iter_mut().zip(row) {
                *d += dzo * w;
            }
        }
        d_act = d_in;
    }

    // Max-pool: each feature's gradient goes to its winning point only.
    let width = params.pooled_width();
    let mut rows: Vec<usize> = cache
        .argmax
        .iter()
        .zip(&d_act)
        .filter(|(_, d)| **d != 0.0)
        .map(|(i, _)| *i)
        .collect();
    rows.sort_unstable();
    rows.dedup();
    let r = rows.len();
    if r == 0 {
        return Ok(want_input.then(|| vec![0.0; cache.n * 3]));
    }
    let mut d_rows = vec![0.0; r * width];
    for (f, (&i, &d)) in cache.argmax.iter().zip(&d_act).enumerate() {
        if d != 0.0 {
            let ri = rows.binary_search(&i).expect("row collected above");
            d_rows[ri * width + f] += d;
        }
    }

    let layers = params.point_layers.len();
    for k in (0..layers).rev() {
        let layer = &params.point_layers[k];
        let (fi, fo) = (layer.inputs, layer.outputs);
        let out = &cache.point_acts[k + 1];
        // dZ = dA * relu'(z) on the active rows.
        for (ri, &i) in rows.iter().enumerate() {
            let a = &out[i * fo..(i + 1) * fo];
            for (d, v) in d_rows[ri * fo..(ri + 1) * fo].iter_mut().zip(a) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &cache.point_acts[k];
        let mut x_rows = Vec::with_capacity(r * fi);
        for &i in &rows {
            x_rows.extend_from_slice(&input[i * fi..(i + 1) * fi]);
        }
        let g = &mut grads.point_layers[k];
        // dW += dZ^T X
        gemm(fo, r, fi, &d_rows, 1, fo as isize, &x_rows, fi as isize, 1, &mut g.weight, true);
        for row in d_rows.chunks_exact(fo) {
            for (b, d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if k > 0 || want_input {
            // dX = dZ W
            let mut d_prev = vec![0.0; r * fi];
            gemm(r, fo, fi, &d_rows, fo as isize, 1, &layer.weight, fi as isize, 1, &mut d_prev, false);
            d_rows = d_prev;
        }
    }

    if !want_input {
        return Ok(None);
    }
    let mut d_cloud = vec![0.0; cache.n * 3];
    for (ri, &i) in rows.iter().enumerate() {
        d_cloud[i * 3..i * 3 + 3].copy_from_slice(&d_rows[ri * 3..ri * 3 + 3]);
    }
    Ok(Some(d_cloud))
}

/// Gradients of `<d_output, block(cloud)>` with respect to the parameters
/// and the input points.
pub fn block_backward(
    cache: &BlockCache,
    params: &BlockParams,
    d_output: &[f64],
) -> Result<(BlockParams, Vec<Point3>), NetworkError> {
    let mut grads = params.zeros_like();
    let d = block_backward_into(cache, params, d_output, &mut grads, true)?.expect("input gradient requested");
    let d_cloud = d.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
    Ok((grads, d_cloud))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn small_block(rng: &mut ChaCha8Rng) -> BlockParams {
        let mut p = BlockParams::new(&[8, 16], &[12], 5, rng);
        // nonzero biases so ReLUs are not all aligned at the origin
        for l in p.point_layers.iter_mut().chain(p.head_layers.iter_mut()) {
            for b in l.bias.iter_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        p
    }

    #[test]
    fn empty_cloud_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = small_block(&mut rng);
        assert_eq!(block_forward(&PointCloud::default(), &p).unwrap_err(), NetworkError::EmptyCloud);
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = small_block(&mut rng);
        let cloud = random_cloud(40, &mut rng);
        let (a, _) = block_forward(&cloud, &p).unwrap();
        let mut pts = cloud.points.clone();
        pts.reverse();
        pts.rotate_left(7);
        let (b, _) = block_forward(&PointCloud::new(pts), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_point_pool_is_its_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = small_block(&mut rng);
        let cloud = random_cloud(1, &mut rng);
        let (_, cache) = block_forward(&cloud, &p).unwrap();
        assert_eq!(cache.head_acts[0], cache.point_acts[2]);
        assert!(cache.argmax.iter().all(|&i| i == 0));
    }

    #[test]
    fn zero_weight_toy_by_hand() {
        // per-point: 3 -> 2, head: 2 -> 2 -> 1; zero weights, biases chosen
        // so ReLU clips one unit.
        let mut p = BlockParams {
            point_layers: vec![Dense::zeros(3, 2)],
            head_layers: vec![Dense::zeros(2, 2), Dense::zeros(2, 1)],
        };
        p.point_layers[0].bias = vec![0.5, -1.0];
        p.head_layers[0].bias = vec![-0.25, 2.0];
        p.head_layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        p.head_layers[1].weight = vec![3.0, -1.0];
        p.head_layers[1].bias = vec![0.1];
        let cloud = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 0.0, 1.0)]);
        let (out, _) = block_forward(&cloud, &p).unwrap();
        // pooled = relu([0.5, -1]) = [0.5, 0]
        // hidden = relu([0.5 - 0.25, 0 + 2]) = [0.25, 2]
        // out = 3 * 0.25 - 2 + 0.1 = -1.15
        assert!((out[0] + 1.15).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = small_block(&mut rng);
        let cloud = random_cloud(16, &mut rng);
        let (_, cache) = block_forward(&cloud, &p).unwrap();
        let (g, d) = block_backward(&cache, &p, &[0.0; 5]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(d.iter().all(|q| *q == Point3::ORIGIN));
    }

    #[test]
    fn non_argmax_points_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = small_block(&mut rng);
        let cloud = random_cloud(64, &mut rng);
        let (_, cache) = block_forward(&cloud, &p).unwrap();
        let (_, d) = block_backward(&cache, &p, &[1.0, -0.5, 0.3, 2.0, 0.7]).unwrap();
        for (i, q) in d.iter().enumerate() {
            if !cache.argmax.contains(&i) {
                assert_eq!(*q, Point3::ORIGIN);
            }
        }
    }

    #[test]
    fn backward_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = small_block(&mut rng);
        let cloud = random_cloud(4, &mut rng);
        let (_, cache) = block_forward(&cloud, &p).unwrap();
        assert!(matches!(block_backward(&cache, &p, &[0.0; 4]), Err(NetworkError::ShapeMismatch(_))));
        let other = BlockParams::new(&[4], &[], 5, &mut rng);
        let mut g = other.zeros_like();
        assert!(block_backward_into(&cache, &p, &[0.0; 5], &mut g, false).is_err());
    }
}
