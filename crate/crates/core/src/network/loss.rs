use alloc::vec::Vec;

use super::model::{EpbrmModel, Mechanism, Prediction, PredictionGrad};
use crate::boxcodec::{self, layout};
use crate::geometry::{Point3, Size3};
use crate::math;

/// `0.5 r^2` inside `[-delta, delta]`, linear outside.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    residual.clamp(-delta, delta)
}

/// Regression target in the proposal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    /// Object center relative to the proposal location.
    pub center: Point3,
    pub yaw: f64,
    pub size: Size3,
}

/// Per-term multipliers; all 1 for the plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub rot_cls: f64,
    pub rot_reg: f64,
    pub size: f64,
    pub loc_center: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { loc: 1.0, rot_cls: 1.0, rot_reg: 1.0, size: 1.0, loc_center: 1.0, huber_delta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loc: f64,
    pub rot_cls: f64,
    pub rot_reg: f64,
    pub size: f64,
    /// Present only for models with a centering stage.
    pub loc_center: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.loc += k * other.loc;
        self.rot_cls += k * other.rot_cls;
        self.rot_reg += k * other.rot_reg;
        self.size += k * other.size;
        self.loc_center = match (self.loc_center, other.loc_center) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + k * b.unwrap_or(0.0)),
        };
        self.total += k * other.total;
    }
}

/// Multi-task loss of one prediction and its gradient with respect to the
/// raw head outputs and the decoded stage parameters.
///
/// The target is carried through the stage transforms into the frame the
/// head predicts in, and every term is computed there. The location
/// residual is divided by the regression bound `d` after clamping the target
/// to `0.999 d`; rotation uses cross-entropy on the bin logits plus a Huber
/// term on the target bin's residual only; size compares log-residuals.
/// Each centering stage adds a Huber term on its decoded shift minus the
/// object center in that stage's input frame, divided by the translation
/// bound.
pub fn multitask_loss(
    prediction: &Prediction,
    target: &BoxTarget,
    model: &EpbrmModel,
    weights: &LossWeights,
) -> (LossBreakdown, PredictionGrad) {
    let bounds = model.bounds();
    let d = bounds.regression().d;
    let bins = model.bins();
    let n_bins = bins.count();
    let anchor = model.anchor();
    let delta = weights.huber_delta;
    let raw = &prediction.head_raw;
    let mut grad = PredictionGrad::zeros(model);

    // Target in every stage frame: frames[k] is the input frame of stage k.
    let mut frames: Vec<(Point3, f64, Size3)> = Vec::with_capacity(model.stages.len() + 1);
    frames.push((target.center, target.yaw, target.size));
    for p in &prediction.stage_params {
        let (c, y, s) = *frames.last().expect("seeded above");
        frames.push(p.apply_box(c, y, s));
    }
    let (t_center, t_yaw, t_size) = *frames.last().expect("seeded above");
    let mut d_center = Point3::ORIGIN;
    let mut d_yaw = 0.0;

    // Location.
    let mut loc = 0.0;
    let loc_grad = boxcodec::decode_location_grad([raw[0], raw[1], raw[2]], &bounds.regression());
    let pred_loc = prediction.location.to_array();
    let tgt = t_center.to_array();
    let mut d_tgt = [0.0; 3];
    for i in 0..3 {
        let limit = 0.999 * d[i];
        let clamped = tgt[i].clamp(-limit, limit);
        let r = (pred_loc[i] - clamped) / d[i];
        loc += huber(r, delta);
        let g = weights.loc * huber_grad(r, delta) / d[i];
        grad.head_raw[layout::LOC + i] += g * loc_grad[i];
        if tgt[i].abs() < limit {
            d_tgt[i] = -g;
        }
    }
    d_center += Point3::from_array(d_tgt);

    // Rotation: softmax cross-entropy over bins, residual on the target bin.
    let (bin, residual) = boxcodec::encode_rotation(t_yaw, &bins);
    let logits = &raw[layout::CLS..layout::CLS + n_bins];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| math::exp(v - max)).collect();
    let sum: f64 = exps.iter().sum();
    let rot_cls = math::ln(sum) - (logits[bin] - max);
    for (i, e) in exps.iter().enumerate() {
        let p = e / sum;
        grad.head_raw[layout::CLS + i] += weights.rot_cls * (p - if i == bin { 1.0 } else { 0.0 });
    }
    let reg_idx = layout::reg(n_bins) + bin;
    let r = raw[reg_idx] - residual;
    let rot_reg = huber(r, delta);
    let g = weights.rot_reg * huber_grad(r, delta);
    grad.head_raw[reg_idx] += g;
    d_yaw -= g / bins.half_width();

    // Size in log space.
    let enc = boxcodec::encode_size(t_size, &anchor);
    let sizes = t_size.to_array();
    let mut size = 0.0;
    let mut d_s = [0.0; 3];
    for i in 0..3 {
        let idx = layout::size(n_bins) + i;
        let r = raw[idx] - enc[i];
        size += huber(r, delta);
        let g = weights.size * huber_grad(r, delta);
        grad.head_raw[idx] += g;
        d_s[i] = -g / sizes[i];
    }
    let d_size = Size3::new(d_s[0], d_s[1], d_s[2]);

    // Walk back through the stages, adding centering supervision on the way.
    let mut loc_center = None;
    let t = bounds.translation;
    let mut d_frame = (d_center, d_yaw, d_size);
    for k in (0..model.stages.len()).rev() {
        let params = prediction.stage_params[k];
        let mut d_param = [0.0; 3];
        let (c_in, _, _) = frames[k];
        let out = frames[k + 1];
        let (mut dc, dy, ds) = params.apply_box_backward(out, d_frame, &mut d_param);
        if model.stages[k].0 == Mechanism::Centering {
            if let super::StageParams::Translate(o) = params {
                let mut term = 0.0;
                let (oa, ca) = (o.to_array(), c_in.to_array());
                let mut dca = [0.0; 3];
                for i in 0..3 {
                    let r = (oa[i] - ca[i]) / t[i];
                    term += huber(r, delta);
                    let g = weights.loc_center * huber_grad(r, delta) / t[i];
                    d_param[i] += g;
                    dca[i] = -g;
                }
                dc += Point3::from_array(dca);
                *loc_center.get_or_insert(0.0) += term;
            }
        }
        grad.stage_params[k] = d_param;
        d_frame = (dc, dy, ds);
    }

    let total = weights.loc * loc
        + weights.rot_cls * rot_cls
        + weights.rot_reg * rot_reg
        + weights.size * size
        + weights.loc_center * loc_center.unwrap_or(0.0);
    (LossBreakdown { loc, rot_cls, rot_reg, size, loc_center, total }, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ObjectClass;
    use crate::geometry::{Box3D, PointCloud};
    use crate::network::{epbrm_forward, Membership, ModelConfig, StageParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert_eq!(huber(-1.0, 1.0), 0.5);
        assert_eq!(huber(2.0, 1.0), 1.5);
        let delta = 0.3;
        let below = 0.5 * delta * delta;
        assert!((huber(delta, delta) - below).abs() < 1e-15);
        assert!((huber(delta + 1e-12, delta) - below).abs() < 1e-11);
        assert_eq!(huber_grad(5.0, 1.0), 1.0);
        assert_eq!(huber_grad(-0.25, 1.0), -0.25);
    }

    fn model(mechanisms: Vec<Mechanism>, seed: u64) -> EpbrmModel {
        let cfg = ModelConfig {
            class: ObjectClass::Car,
            dist_bound: 0.15,
            mechanisms,
            rotation_bins: 12,
            n_points: 16,
            point_widths: vec![8],
            head_widths: vec![],
        };
        EpbrmModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// A prediction whose head outputs are set directly, with no stages.
    fn synthetic_prediction(model: &EpbrmModel, raw: Vec<f64>) -> Prediction {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud: PointCloud = (0..16).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
        let (mut p, _) = epbrm_forward(&cloud, model, Membership::Sample(&mut rng)).unwrap();
        let bins = model.bins();
        let out = boxcodec::RawBoxOutput::split(&raw, &bins).unwrap();
        p.location = boxcodec::decode_location(out.location, &model.bounds().regression());
        p.yaw = boxcodec::decode_rotation(out.rot_cls, out.rot_reg, &bins);
        p.size = boxcodec::decode_size(out.size, &model.anchor());
        p.bbox = Box3D::new(p.location, p.size, p.yaw).unwrap();
        p.head_raw = raw;
        p
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let m = model(vec![], 1);
        let bins = m.bins();
        let target = BoxTarget { center: Point3::new(0.02, -0.03, 0.01), yaw: 1.0, size: Size3::new(1.6, 1.7, 3.9) };
        let mut raw = vec![0.0; 30];
        let d = m.bounds().regression().d;
        for i in 0..3 {
            raw[i] = boxcodec::unbounded(target.center.to_array()[i], d[i]);
        }
        let (bin, res) = boxcodec::encode_rotation(target.yaw, &bins);
        raw[3 + bin] = 20.0;
        raw[15 + bin] = res;
        let enc = boxcodec::encode_size(target.size, &m.anchor());
        raw[27..30].copy_from_slice(&enc);
        let pred = synthetic_prediction(&m, raw);
        let (loss, _) = multitask_loss(&pred, &target, &m, &LossWeights::default());
        assert!(loss.loc < 1e-20, "{}", loss.loc);
        assert!(loss.rot_reg < 1e-20);
        assert!(loss.size < 1e-20);
        assert!(loss.rot_cls < 1e-3);
        assert_eq!(loss.loc_center, None);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_bins() {
        let m = model(vec![], 2);
        let pred = synthetic_prediction(&m, vec![0.0; 30]);
        let target = BoxTarget { center: Point3::ORIGIN, yaw: 0.4, size: Size3::new(1.5, 1.57, 3.33) };
        let (loss, _) = multitask_loss(&pred, &target, &m, &LossWeights::default());
        assert!((loss.rot_cls - 12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn centering_term_present_only_with_centering() {
        let target = BoxTarget { center: Point3::new(0.1, 0.0, 0.0), yaw: 0.2, size: Size3::new(1.5, 1.57, 3.33) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud: PointCloud = (0..40).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random())).collect();
        for (mech, expect) in [(Mechanism::Translation, false), (Mechanism::Centering, true)] {
            let m = model(vec![mech], 4);
            let (pred, _) = epbrm_forward(&cloud, &m, Membership::Sample(&mut rng)).unwrap();
            let (loss, _) = multitask_loss(&pred, &target, &m, &LossWeights::default());
            assert_eq!(loss.loc_center.is_some(), expect);
            let sum = loss.loc + loss.rot_cls + loss.rot_reg + loss.size + loss.loc_center.unwrap_or(0.0);
            assert!((loss.total - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_term_vanishes_at_true_center() {
        let m = model(vec![Mechanism::Centering], 5);
        let mut pred = synthetic_prediction(&model(vec![], 5), vec![0.0; 30]);
        let target = BoxTarget { center: Point3::new(0.05, -0.02, 0.03), yaw: 0.2, size: Size3::new(1.5, 1.57, 3.33) };
        pred.stage_params = vec![StageParams::Translate(target.center)];
        pred.stage_raw = vec![vec![0.0; 3]];
        let (loss, grad) = multitask_loss(&pred, &target, &m, &LossWeights::default());
        assert!(loss.loc_center.unwrap() < 1e-30);
        assert_eq!(grad.stage_params.len(), 1);
    }
}
