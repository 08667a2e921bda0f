use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::RngCore;

use super::{block_backward_into, block_forward, BlockCache, BlockParams, NetworkError};
use crate::boxcodec::{self, RawBoxOutput, RotationBins, SizeAnchor, TransformBounds};
use crate::class::ObjectClass;
use crate::geometry::{Box3D, Point3, PointCloud, Size3};
use crate::math::{cos, sin};
use crate::pipeline::{crop_indices, resample_indices, SamplingRegion};

/// Spatial transformation applied to the cloud before the final regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// Learned shift with no direct target.
    Translation,
    /// Shift supervised to land on the object center.
    Centering,
    /// Rotation about z.
    Rotation,
    /// Ground-plane and vertical scaling.
    Scaling,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Translation, Mechanism::Centering, Mechanism::Rotation, Mechanism::Scaling];

    /// Raw outputs the stage's block must produce.
    pub fn output_width(self) -> usize {
        match self {
            Mechanism::Translation | Mechanism::Centering => 3,
            Mechanism::Rotation => 1,
            Mechanism::Scaling => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Mechanism::Translation => 0,
            Mechanism::Centering => 1,
            Mechanism::Rotation => 2,
            Mechanism::Scaling => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Translation => "translation",
            Mechanism::Centering => "centering",
            Mechanism::Rotation => "rotation",
            Mechanism::Scaling => "scaling",
        })
    }
}

impl FromStr for Mechanism {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "translation" | "translate" => Ok(Mechanism::Translation),
            "centering" | "center" => Ok(Mechanism::Centering),
            "rotation" | "rotate" => Ok(Mechanism::Rotation),
            "scaling" | "scale" => Ok(Mechanism::Scaling),
            _ => Err(NetworkError::InvalidConfig("unknown mechanism")),
        }
    }
}

/// Everything needed to build a model with fresh weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub class: ObjectClass,
    pub dist_bound: f64,
    pub mechanisms: Vec<Mechanism>,
    pub rotation_bins: usize,
    pub n_points: usize,
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
}

impl ModelConfig {
    pub fn new(class: ObjectClass) -> Self {
        ModelConfig {
            class,
            dist_bound: 0.15,
            mechanisms: vec![Mechanism::Centering],
            rotation_bins: 12,
            n_points: 256,
            point_widths: vec![64, 128, 256],
            head_widths: vec![128],
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.dist_bound > 0.0 && self.dist_bound.is_finite()) {
            return Err(NetworkError::InvalidConfig("dist_bound must be positive"));
        }
        if self.rotation_bins < 2 {
            return Err(NetworkError::InvalidConfig("need at least 2 rotation bins"));
        }
        if self.n_points == 0 {
            return Err(NetworkError::InvalidConfig("n_points must be positive"));
        }
        if self.point_widths.is_empty() || self.point_widths.iter().chain(&self.head_widths).any(|w| *w == 0) {
            return Err(NetworkError::InvalidConfig("layer widths must be positive and non-empty"));
        }
        Ok(())
    }
}

/// A block per transformation stage plus the regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct EpbrmModel {
    pub config: ModelConfig,
    pub stages: Vec<(Mechanism, BlockParams)>,
    pub head: BlockParams,
}

impl EpbrmModel {
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self, NetworkError> {
        config.validate()?;
        let stages = config
            .mechanisms
            .iter()
            .map(|&m| (m, BlockParams::new(&config.point_widths, &config.head_widths, m.output_width(), rng)))
            .collect();
        let bins = RotationBins::new(config.rotation_bins).expect("validated");
        let head = BlockParams::new(&config.point_widths, &config.head_widths, RawBoxOutput::width(&bins), rng);
        Ok(EpbrmModel { config, stages, head })
    }

    pub fn bounds(&self) -> TransformBounds {
        TransformBounds::from_dist_bound(self.config.dist_bound)
    }

    pub fn bins(&self) -> RotationBins {
        RotationBins::new(self.config.rotation_bins).expect("validated at construction")
    }

    pub fn anchor(&self) -> SizeAnchor {
        self.config.class.anchor()
    }

    pub fn region(&self) -> SamplingRegion {
        self.config.class.sampling_region()
    }

    pub fn has_centering(&self) -> bool {
        self.stages.iter().any(|(m, _)| *m == Mechanism::Centering)
    }

    /// Checks stage/head output widths and layer chaining.
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.config.validate()?;
        for (m, block) in &self.stages {
            block.validate()?;
            if block.output_width() != m.output_width() {
                return Err(NetworkError::ShapeMismatch("stage output width does not match its mechanism"));
            }
        }
        self.head.validate()?;
        if self.head.output_width() != RawBoxOutput::width(&self.bins()) {
            return Err(NetworkError::ShapeMismatch("head output width must be 6 + 2 * N_R"));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            stages: self.stages.iter().map(|(_, b)| b.zeros_like()).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// All parameter tensors: stages in order, then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.stages.iter().flat_map(|(_, b)| b.tensors()).chain(self.head.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (_, b) in self.stages.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Gradient buffer shaped like an [`EpbrmModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub stages: Vec<BlockParams>,
    pub head: BlockParams,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.stages.iter().flat_map(|b| b.tensors()).chain(self.head.tensors()).collect()
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, k: f64) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.add_scaled(b, k);
        }
        self.head.add_scaled(&other.head, k);
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// Decoded parameters of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageParams {
    /// Shift subtracted from every point (translation and centering).
    Translate(Point3),
    /// Points are rotated by `-angle` (clockwise convention).
    Rotate(f64),
    /// Ground-plane and vertical factors; points are divided by them.
    Scale { xy: f64, z: f64 },
}

impl StageParams {
    fn decode(mechanism: Mechanism, raw: &[f64], bounds: &TransformBounds) -> Self {
        match mechanism {
            Mechanism::Translation | Mechanism::Centering => {
                StageParams::Translate(boxcodec::decode_translation([raw[0], raw[1], raw[2]], bounds))
            }
            Mechanism::Rotation => StageParams::Rotate(boxcodec::decode_rotation_transform(raw[0], bounds)),
            Mechanism::Scaling => {
                let (xy, z) = boxcodec::decode_scale([raw[0], raw[1]], bounds);
                StageParams::Scale { xy, z }
            }
        }
    }

    /// d(decoded)/d(raw), componentwise.
    fn decode_grad(mechanism: Mechanism, raw: &[f64], bounds: &TransformBounds) -> [f64; 3] {
        match mechanism {
            Mechanism::Translation | Mechanism::Centering => {
                boxcodec::decode_translation_grad([raw[0], raw[1], raw[2]], bounds)
            }
            Mechanism::Rotation => [boxcodec::decode_rotation_transform_grad(raw[0], bounds), 0.0, 0.0],
            Mechanism::Scaling => {
                let [a, b] = boxcodec::decode_scale_grad([raw[0], raw[1]], bounds);
                [a, b, 0.0]
            }
        }
    }

    /// Maps a point from the stage's input frame to its output frame.
    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        match *self {
            StageParams::Translate(o) => p - o,
            StageParams::Rotate(r) => p.rotate_z(-r),
            StageParams::Scale { xy, z } => Point3::new(p.x / xy, p.y / xy, p.z / z),
        }
    }

    /// Maps a point from the output frame back to the input frame.
    pub fn invert(&self, p: Point3) -> Point3 {
        match *self {
            StageParams::Translate(o) => p + o,
            StageParams::Rotate(r) => p.rotate_z(r),
            StageParams::Scale { xy, z } => Point3::new(p.x * xy, p.y * xy, p.z * z),
        }
    }

    /// Box expressed in the output frame: `(center, yaw, size)`.
    pub fn apply_box(&self, center: Point3, yaw: f64, size: Size3) -> (Point3, f64, Size3) {
        let c = self.apply(center);
        match *self {
            StageParams::Translate(_) => (c, yaw, size),
            StageParams::Rotate(r) => (c, yaw - r, size),
            StageParams::Scale { xy, z } => (c, yaw, Size3::new(size.h / z, size.w / xy, size.l / xy)),
        }
    }

    pub fn invert_box(&self, center: Point3, yaw: f64, size: Size3) -> (Point3, f64, Size3) {
        let c = self.invert(center);
        match *self {
            StageParams::Translate(_) => (c, yaw, size),
            StageParams::Rotate(r) => (c, yaw + r, size),
            StageParams::Scale { xy, z } => (c, yaw, Size3::new(size.h * z, size.w * xy, size.l * xy)),
        }
    }

    /// Backward of [`StageParams::apply`] for one point: given the output
    /// point `out` and its gradient `d_out`, returns the input gradient and
    /// accumulates into `d_param` (gradient w.r.t. the decoded values).
    #[inline]
    pub(crate) fn apply_backward(&self, out: Point3, d_out: Point3, d_param: &mut [f64; 3]) -> Point3 {
        match *self {
            StageParams::Translate(_) => {
                d_param[0] -= d_out.x;
                d_param[1] -= d_out.y;
                d_param[2] -= d_out.z;
                d_out
            }
            StageParams::Rotate(r) => {
                // out = (x cos r - y sin r, x sin r + y cos r, z)
                let (s, c) = (sin(r), cos(r));
                d_param[0] += -d_out.x * out.y + d_out.y * out.x;
                Point3::new(d_out.x * c + d_out.y * s, -d_out.x * s + d_out.y * c, d_out.z)
            }
            StageParams::Scale { xy, z } => {
                d_param[0] -= (d_out.x * out.x + d_out.y * out.y) / xy;
                d_param[1] -= d_out.z * out.z / z;
                Point3::new(d_out.x / xy, d_out.y / xy, d_out.z / z)
            }
        }
    }

    /// Backward of [`StageParams::apply_box`]. `out` is the forward result;
    /// returns gradients for the input `(center, yaw, size)`.
    pub(crate) fn apply_box_backward(
        &self,
        out: (Point3, f64, Size3),
        d_out: (Point3, f64, Size3),
        d_param: &mut [f64; 3],
    ) -> (Point3, f64, Size3) {
        let (c_out, _, s_out) = out;
        let (dc, dyaw, ds) = d_out;
        let d_center = self.apply_backward(c_out, dc, d_param);
        match *self {
            StageParams::Translate(_) => (d_center, dyaw, ds),
            StageParams::Rotate(_) => {
                d_param[0] -= dyaw;
                (d_center, dyaw, ds)
            }
            StageParams::Scale { xy, z } => {
                d_param[0] -= (ds.w * s_out.w + ds.l * s_out.l) / xy;
                d_param[1] -= ds.h * s_out.h / z;
                (d_center, dyaw, Size3::new(ds.h / z, ds.w / xy, ds.l / xy))
            }
        }
    }
}

/// How each stage picks the fixed-size point set it passes on.
pub enum Membership<'a> {
    /// Crop with the sampling region and resample at random.
    Sample(&'a mut dyn RngCore),
    /// Reuse the selections of an earlier pass: entry 0 indexes the input
    /// cloud, entry `k + 1` the output of stage `k`.
    Replay(&'a [Vec<usize>]),
}

/// Model output for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub head_raw: Vec<f64>,
    /// Head location in the last stage's frame.
    pub location: Point3,
    /// Head yaw in `[0, pi)` in the last stage's frame.
    pub yaw: f64,
    /// Head size in the last stage's frame.
    pub size: Size3,
    pub stage_raw: Vec<Vec<f64>>,
    pub stage_params: Vec<StageParams>,
    /// The decoded box mapped back into the proposal frame.
    pub bbox: Box3D,
}

/// Intermediate values of [`epbrm_forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` is the cloud fed to stage `k`; the last entry feeds the
    /// head.
    pub inputs: Vec<PointCloud>,
    /// Point selections, see [`Membership::Replay`].
    pub selections: Vec<Vec<usize>>,
    stage_caches: Vec<BlockCache>,
    head_cache: BlockCache,
}

impl ForwardCache {
    /// True when every block of both passes took the same max-pool winners
    /// and ReLU branches.
    pub fn same_regime(&self, other: &ForwardCache) -> bool {
        self.stage_caches.len() == other.stage_caches.len()
            && self.stage_caches.iter().zip(&other.stage_caches).all(|(a, b)| a.same_regime(b))
            && self.head_cache.same_regime(&other.head_cache)
    }
}

/// Upstream gradient for [`epbrm_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    /// d loss / d raw head outputs.
    pub head_raw: Vec<f64>,
    /// d loss / d decoded stage parameters (translation xyz, rotation in
    /// slot 0, scales xy/z in slots 0/1).
    pub stage_params: Vec<[f64; 3]>,
}

impl PredictionGrad {
    pub fn zeros(model: &EpbrmModel) -> Self {
        PredictionGrad { head_raw: vec![0.0; model.head.output_width()], stage_params: vec![[0.0; 3]; model.stages.len()] }
    }
}

fn select(cloud: &PointCloud, indices: &[usize]) -> Result<PointCloud, NetworkError> {
    indices
        .iter()
        .map(|&i| cloud.points.get(i).copied().ok_or(NetworkError::ShapeMismatch("replayed index out of range")))
        .collect()
}

/// Runs the stages and the head on a cloud expressed in the proposal frame
/// (origin at the proposal location).
pub fn epbrm_forward(
    cloud: &PointCloud,
    model: &EpbrmModel,
    mut membership: Membership<'_>,
) -> Result<(Prediction, ForwardCache), NetworkError> {
    let n = model.config.n_points;
    let bounds = model.bounds();
    let region = model.region();
    let mut selections = Vec::with_capacity(model.stages.len() + 1);

    let first = match &mut membership {
        Membership::Sample(rng) => resample_indices(cloud.len(), n, &mut **rng).ok_or(NetworkError::EmptyCloud)?,
        Membership::Replay(sel) => sel.first().cloned().ok_or(NetworkError::ShapeMismatch("missing replay entry"))?,
    };
    let mut current = select(cloud, &first)?;
    selections.push(first);

    let mut inputs = Vec::with_capacity(model.stages.len() + 1);
    let mut stage_caches = Vec::with_capacity(model.stages.len());
    let mut stage_raw = Vec::with_capacity(model.stages.len());
    let mut stage_params = Vec::with_capacity(model.stages.len());
    for (k, (mechanism, block)) in model.stages.iter().enumerate() {
        let (raw, cache) = block_forward(&current, block)?;
        let params = StageParams::decode(*mechanism, &raw, &bounds);
        let moved = current.map(|p| params.apply(p));
        let chosen = match &mut membership {
            Membership::Sample(rng) => {
                let kept = crop_indices(&moved, Point3::ORIGIN, &region);
                if kept.is_empty() {
                    return Err(NetworkError::StageExpelledPoints { stage: k });
                }
                let picks = resample_indices(kept.len(), n, &mut **rng).expect("kept is nonempty");
                picks.into_iter().map(|i| kept[i]).collect()
            }
            Membership::Replay(sel) => {
                sel.get(k + 1).cloned().ok_or(NetworkError::ShapeMismatch("missing replay entry"))?
            }
        };
        let next = select(&moved, &chosen)?;
        selections.push(chosen);
        inputs.push(core::mem::replace(&mut current, next));
        stage_caches.push(cache);
        stage_raw.push(raw);
        stage_params.push(params);
    }

    let (head_raw, head_cache) = block_forward(&current, &model.head)?;
    inputs.push(current);
    let bins = model.bins();
    let out = RawBoxOutput::split(&head_raw, &bins).ok_or(NetworkError::ShapeMismatch("head output width"))?;
    let location = boxcodec::decode_location(out.location, &bounds.regression());
    let yaw = boxcodec::decode_rotation(out.rot_cls, out.rot_reg, &bins);
    let size = boxcodec::decode_size(out.size, &model.anchor());

    let (mut c, mut y, mut s) = (location, yaw, size);
    for params in stage_params.iter().rev() {
        (c, y, s) = params.invert_box(c, y, s);
    }
    let bbox = Box3D::new(c, s, y).map_err(|_| NetworkError::ShapeMismatch("decoded box is not finite"))?;

    let prediction = Prediction { head_raw, location, yaw, size, stage_raw, stage_params, bbox };
    Ok((prediction, ForwardCache { inputs, selections, stage_caches, head_cache }))
}

/// Accumulates parameter gradients into `grads`. Point selections are held
/// fixed: gradients reach a transformed point only through the resampled
/// copies that used it.
pub fn epbrm_backward(
    model: &EpbrmModel,
    cache: &ForwardCache,
    prediction: &Prediction,
    d_prediction: &PredictionGrad,
    grads: &mut ModelGrads,
) -> Result<(), NetworkError> {
    let stages = model.stages.len();
    if d_prediction.stage_params.len() != stages || grads.stages.len() != stages || cache.stage_caches.len() != stages {
        return Err(NetworkError::ShapeMismatch("stage count differs between model, cache and gradients"));
    }
    let bounds = model.bounds();
    let mut d_cloud =
        block_backward_into(&cache.head_cache, &model.head, &d_prediction.head_raw, &mut grads.head, stages > 0)?;

    for k in (0..stages).rev() {
        let (mechanism, block) = &model.stages[k];
        let params = prediction.stage_params[k];
        let input = &cache.inputs[k];
        let d_next = d_cloud.take().expect("input gradient requested for every stage output");
        let mut d_param = d_prediction.stage_params[k];

        // Scatter through the resample, then through the point transform.
        let mut d_moved = vec![Point3::ORIGIN; input.len()];
        for (j, &i) in cache.selections[k + 1].iter().enumerate() {
            d_moved[i] += Point3::new(d_next[3 * j], d_next[3 * j + 1], d_next[3 * j + 2]);
        }
        let want_input = k > 0;
        let mut d_input = vec![0.0; if want_input { 3 * input.len() } else { 0 }];
        for (i, (&p, &d)) in input.points.iter().zip(&d_moved).enumerate() {
            if d == Point3::ORIGIN {
                continue;
            }
            let g = params.apply_backward(params.apply(p), d, &mut d_param);
            if want_input {
                d_input[3 * i] += g.x;
                d_input[3 * i + 1] += g.y;
                d_input[3 * i + 2] += g.z;
            }
        }

        let raw = &prediction.stage_raw[k];
        let dec = StageParams::decode_grad(*mechanism, raw, &bounds);
        let d_raw: Vec<f64> = (0..mechanism.output_width()).map(|i| d_param[i] * dec[i]).collect();
        let d_block = block_backward_into(&cache.stage_caches[k], block, &d_raw, &mut grads.stages[k], want_input)?;
        if let Some(db) = d_block {
            for (a, b) in d_input.iter_mut().zip(db) {
                *a += b;
            }
            d_cloud = Some(d_input);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(mechanisms: Vec<Mechanism>) -> ModelConfig {
        ModelConfig {
            class: ObjectClass::Car,
            dist_bound: 0.15,
            mechanisms,
            rotation_bins: 4,
            n_points: 32,
            point_widths: vec![8, 16],
            head_widths: vec![8],
        }
    }

    fn object_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-0.8..0.8), rng.random_range(-1.6..1.6), rng.random_range(-0.4..1.2)))
            .collect()
    }

    #[test]
    fn mechanism_names_round_trip() {
        for m in Mechanism::ALL {
            let s = alloc::format!("{m}");
            assert_eq!(s.parse::<Mechanism>().unwrap(), m);
            assert_eq!(Mechanism::from_code(m.code()), Some(m));
        }
        assert!("shear".parse::<Mechanism>().is_err());
    }

    #[test]
    fn model_shapes_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = EpbrmModel::new(tiny_config(Mechanism::ALL.to_vec()), &mut rng).unwrap();
        m.validate().unwrap();
        assert_eq!(m.head.output_width(), 6 + 2 * 4);
        assert_eq!(m.stages[2].1.output_width(), 1);
        assert_eq!(m.stages[3].1.output_width(), 2);
    }

    #[test]
    fn box_transforms_invert() {
        let c = Point3::new(0.3, -0.2, 0.1);
        let s = Size3::new(1.4, 1.6, 3.5);
        for p in [StageParams::Translate(Point3::new(0.1, 0.05, -0.02)), StageParams::Rotate(0.3), StageParams::Scale { xy: 1.2, z: 0.8 }] {
            let (c1, y1, s1) = p.apply_box(c, 0.7, s);
            let (c2, y2, s2) = p.invert_box(c1, y1, s1);
            assert!((c2 - c).norm() < 1e-12);
            assert!((y2 - 0.7).abs() < 1e-12);
            assert!((s2.l - s.l).abs() < 1e-12 && (s2.h - s.h).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_box_frame_matches_point_transform() {
        // A box's corners mapped by the point transform equal the corners of
        // the transformed box.
        let b = Box3D::new(Point3::new(0.4, -0.3, 0.2), Size3::new(1.5, 1.6, 3.9), 0.5).unwrap();
        let p = StageParams::Rotate(0.35);
        let (c, y, s) = p.apply_box(b.center, b.yaw, b.size);
        let moved = Box3D::new(c, s, y).unwrap();
        let expected = crate::geometry::box_corners(&b).map(|q| p.apply(q));
        for q in crate::geometry::box_corners(&moved) {
            assert!(expected.iter().any(|e| e.distance(q) < 1e-12));
        }
    }

    #[test]
    fn no_stages_is_plain_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EpbrmModel::new(tiny_config(vec![]), &mut rng).unwrap();
        let cloud = object_cloud(&mut rng, 50);
        let (pred, cache) = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).unwrap();
        assert!(pred.stage_params.is_empty());
        assert_eq!(cache.inputs.len(), 1);
        assert_eq!(pred.bbox.center, pred.location);

        // gradients equal the head block's own backward
        let mut d = PredictionGrad::zeros(&model);
        for (i, v) in d.head_raw.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut grads = model.zero_grads();
        epbrm_backward(&model, &cache, &pred, &d, &mut grads).unwrap();
        let (direct, _) = super::super::block_backward(&cache.head_cache, &model.head, &d.head_raw).unwrap();
        assert_eq!(grads.head, direct);
    }

    #[test]
    fn location_within_regression_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mechanisms in [vec![], vec![Mechanism::Centering], vec![Mechanism::Rotation, Mechanism::Scaling]] {
            let model = EpbrmModel::new(tiny_config(mechanisms), &mut rng).unwrap();
            let cloud = object_cloud(&mut rng, 40);
            let (pred, _) = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).unwrap();
            for v in pred.location.to_array() {
                assert!(v.abs() < 0.075);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EpbrmModel::new(tiny_config(vec![Mechanism::Centering, Mechanism::Rotation]), &mut rng).unwrap();
        let cloud = object_cloud(&mut rng, 40);
        let (pred, cache) = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).unwrap();
        let mut grads = model.zero_grads();
        epbrm_backward(&model, &cache, &pred, &PredictionGrad::zeros(&model), &mut grads).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn replay_reproduces_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EpbrmModel::new(tiny_config(vec![Mechanism::Translation, Mechanism::Scaling]), &mut rng).unwrap();
        let cloud = object_cloud(&mut rng, 70);
        let (a, cache) = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).unwrap();
        let (b, _) = epbrm_forward(&cloud, &model, Membership::Replay(&cache.selections)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_that_expels_everything_reports_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = tiny_config(vec![Mechanism::Rotation, Mechanism::Translation]);
        cfg.class = ObjectClass::Pedestrian;
        let model = EpbrmModel::new(cfg, &mut rng).unwrap();
        // every point far outside the pedestrian cylinder
        let cloud: PointCloud = (0..10).map(|i| Point3::new(5.0 + i as f64, 0.0, 0.0)).collect();
        let err = epbrm_forward(&cloud, &model, Membership::Sample(&mut rng)).unwrap_err();
        assert_eq!(err, NetworkError::StageExpelledPoints { stage: 0 });
    }
}
