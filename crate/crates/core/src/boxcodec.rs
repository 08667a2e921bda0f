//! Closed-form maps between raw network outputs and geometric quantities.
//!
//! Transform parameters and box locations use the bounded form
//! `2 * (sigmoid(t) - 0.5) * bound`, scales use `base^(2 * (sigmoid(t) - 0.5))`
//! and sizes are exponential residuals on a per-class anchor. Rotation is a
//! hybrid of a bin classifier over `[0, pi)` and a per-bin residual
//! normalized by half the bin width.
//!
//! Each decoder has a `*_grad` companion returning the derivative with
//! respect to its raw input, used by the backward pass.

use crate::geometry::{Point3, Size3};
use crate::math::{self, sigmoid, PI};

/// Ranges of the spatial transformation mechanisms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformBounds {
    /// Translation / centering range per axis (meters).
    pub translation: [f64; 3],
    /// Rotation range (radians).
    pub rotation: f64,
    pub scale_xy: f64,
    pub scale_z: f64,
}

impl TransformBounds {
    /// Translation range equal to `dist_bound` on every axis, rotation
    /// range pi/4 and scale bases 2.
    pub fn from_dist_bound(dist_bound: f64) -> Self {
        TransformBounds {
            translation: [dist_bound; 3],
            rotation: PI / 4.0,
            scale_xy: 2.0,
            scale_z: 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.translation.iter().all(|t| *t > 0.0 && t.is_finite())
            && self.rotation > 0.0
            && self.scale_xy > 1.0
            && self.scale_z > 1.0
    }

    pub fn regression(&self) -> RegressionBounds {
        RegressionBounds { d: self.translation.map(|t| 0.5 * t) }
    }
}

/// Range of the final location regression: half the translation range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBounds {
    pub d: [f64; 3],
}

/// Per-class canonical box size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeAnchor {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl SizeAnchor {
    pub const CAR: SizeAnchor = SizeAnchor { h: 1.50, w: 1.57, l: 3.33 };
    pub const PEDESTRIAN: SizeAnchor = SizeAnchor { h: 1.73, w: 0.60, l: 0.80 };
    pub const CYCLIST: SizeAnchor = SizeAnchor { h: 1.73, w: 0.60, l: 1.76 };

    pub fn size(&self) -> Size3 {
        Size3::new(self.h, self.w, self.l)
    }

    fn array(&self) -> [f64; 3] {
        [self.h, self.w, self.l]
    }
}

/// Equal-width rotation bins covering `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationBins {
    count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("rotation needs at least 2 bins, got {0}")]
pub struct TooFewBins(pub usize);

impl RotationBins {
    pub fn new(count: usize) -> Result<Self, TooFewBins> {
        if count < 2 {
            return Err(TooFewBins(count));
        }
        Ok(RotationBins { count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> f64 {
        PI / self.count as f64
    }

    /// Residual normalizer: half a bin.
    pub fn half_width(&self) -> f64 {
        PI / (2.0 * self.count as f64)
    }

    pub fn center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.width()
    }
}

impl Default for RotationBins {
    fn default() -> Self {
        RotationBins { count: 12 }
    }
}

/// `2 * (sigmoid(t) - 0.5) * bound`, strictly inside `(-bound, bound)`.
#[inline]
pub fn bounded(t: f64, bound: f64) -> f64 {
    2.0 * (sigmoid(t) - 0.5) * bound
}

#[inline]
pub fn bounded_grad(t: f64, bound: f64) -> f64 {
    let s = sigmoid(t);
    2.0 * s * (1.0 - s) * bound
}

/// Inverse of [`bounded`]; `value` must lie strictly inside the range.
pub fn unbounded(value: f64, bound: f64) -> f64 {
    let s = 0.5 * (value / bound) + 0.5;
    math::ln(s / (1.0 - s))
}

pub fn decode_translation(t: [f64; 3], bounds: &TransformBounds) -> Point3 {
    Point3::new(
        bounded(t[0], bounds.translation[0]),
        bounded(t[1], bounds.translation[1]),
        bounded(t[2], bounds.translation[2]),
    )
}

pub fn decode_translation_grad(t: [f64; 3], bounds: &TransformBounds) -> [f64; 3] {
    [
        bounded_grad(t[0], bounds.translation[0]),
        bounded_grad(t[1], bounds.translation[1]),
        bounded_grad(t[2], bounds.translation[2]),
    ]
}

pub fn decode_rotation_transform(t: f64, bounds: &TransformBounds) -> f64 {
    bounded(t, bounds.rotation)
}

pub fn decode_rotation_transform_grad(t: f64, bounds: &TransformBounds) -> f64 {
    bounded_grad(t, bounds.rotation)
}

fn scale(t: f64, base: f64) -> f64 {
    math::pow(base, 2.0 * (sigmoid(t) - 0.5))
}

fn scale_grad(t: f64, base: f64) -> f64 {
    let s = sigmoid(t);
    scale(t, base) * math::ln(base) * 2.0 * s * (1.0 - s)
}

/// Returns `(scale_xy, scale_z)`, each strictly inside `(1/base, base)`.
pub fn decode_scale(t: [f64; 2], bounds: &TransformBounds) -> (f64, f64) {
    (scale(t[0], bounds.scale_xy), scale(t[1], bounds.scale_z))
}

pub fn decode_scale_grad(t: [f64; 2], bounds: &TransformBounds) -> [f64; 2] {
    [scale_grad(t[0], bounds.scale_xy), scale_grad(t[1], bounds.scale_z)]
}

pub fn decode_location(t: [f64; 3], bounds: &RegressionBounds) -> Point3 {
    Point3::new(bounded(t[0], bounds.d[0]), bounded(t[1], bounds.d[1]), bounded(t[2], bounds.d[2]))
}

pub fn decode_location_grad(t: [f64; 3], bounds: &RegressionBounds) -> [f64; 3] {
    [
        bounded_grad(t[0], bounds.d[0]),
        bounded_grad(t[1], bounds.d[1]),
        bounded_grad(t[2], bounds.d[2]),
    ]
}

/// Bin index and normalized residual (in `[-1, 1]`) of `yaw` folded into
/// `[0, pi)`.
pub fn encode_rotation(yaw: f64, bins: &RotationBins) -> (usize, f64) {
    let theta = math::rem_euclid(yaw, PI);
    let raw = math::floor(theta / bins.width());
    let bin = if raw < 0.0 { 0 } else { (raw as usize).min(bins.count - 1) };
    let residual = (theta - bins.center(bin)) / bins.half_width();
    (bin, residual)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Angle in `[0, pi)` from the argmax bin and that bin's residual.
pub fn decode_rotation(rot_cls: &[f64], rot_reg: &[f64], bins: &RotationBins) -> f64 {
    debug_assert_eq!(rot_cls.len(), bins.count);
    debug_assert_eq!(rot_reg.len(), bins.count);
    let bin = argmax(rot_cls);
    let theta = bins.center(bin) + rot_reg[bin] * bins.half_width();
    math::rem_euclid(theta, PI)
}

/// `anchor * exp(t)` per axis, in `(h, w, l)` order.
pub fn decode_size(t: [f64; 3], anchor: &SizeAnchor) -> Size3 {
    let a = anchor.array();
    Size3::new(a[0] * math::exp(t[0]), a[1] * math::exp(t[1]), a[2] * math::exp(t[2]))
}

/// Log-residuals of `size` relative to the anchor.
pub fn encode_size(size: Size3, anchor: &SizeAnchor) -> [f64; 3] {
    let a = anchor.array();
    let s = size.to_array();
    [math::ln(s[0] / a[0]), math::ln(s[1] / a[1]), math::ln(s[2] / a[2])]
}

/// Raw output layout of the regression head: location (3), rotation logits
/// (`N_R`), rotation residuals (`N_R`), size (3).
#[derive(Debug, Clone, PartialEq)]
pub struct RawBoxOutput<'a> {
    pub location: [f64; 3],
    pub rot_cls: &'a [f64],
    pub rot_reg: &'a [f64],
    pub size: [f64; 3],
}

impl<'a> RawBoxOutput<'a> {
    pub fn width(bins: &RotationBins) -> usize {
        6 + 2 * bins.count
    }

    /// Splits a head output vector; returns `None` on a length mismatch.
    pub fn split(raw: &'a [f64], bins: &RotationBins) -> Option<Self> {
        let n = bins.count;
        if raw.len() != Self::width(bins) {
            return None;
        }
        Some(RawBoxOutput {
            location: [raw[0], raw[1], raw[2]],
            rot_cls: &raw[3..3 + n],
            rot_reg: &raw[3 + n..3 + 2 * n],
            size: [raw[3 + 2 * n], raw[4 + 2 * n], raw[5 + 2 * n]],
        })
    }
}

/// Offsets into the raw head output.
pub(crate) mod layout {
    pub const LOC: usize = 0;
    pub const CLS: usize = 3;
    pub fn reg(n: usize) -> usize {
        3 + n
    }
    pub fn size(n: usize) -> usize {
        3 + 2 * n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn car_bounds() -> TransformBounds {
        TransformBounds::from_dist_bound(0.15)
    }

    #[test]
    fn translation_examples() {
        let b = car_bounds();
        assert_eq!(decode_translation([0.0; 3], &b), Point3::ORIGIN);
        let x = decode_translation([LN3, 0.0, 0.0], &b).x;
        assert!((x - 0.075).abs() < 1e-15, "{x}");
        let sat = decode_translation([30.0, -30.0, 0.0], &b);
        assert!(sat.x < 0.15 && sat.x > 0.149);
        assert!(sat.y > -0.15);
    }

    #[test]
    fn rotation_transform_examples() {
        let b = car_bounds();
        assert_eq!(decode_rotation_transform(0.0, &b), 0.0);
        assert!((decode_rotation_transform(LN3, &b) - PI / 8.0).abs() < 1e-15);
        assert!(decode_rotation_transform(30.0, &b).abs() < PI / 4.0);
    }

    #[test]
    fn scale_examples() {
        let b = car_bounds();
        assert_eq!(decode_scale([0.0, 0.0], &b), (1.0, 1.0));
        let (sxy, sz) = decode_scale([LN3, LN3], &b);
        assert!((sxy - 2f64.sqrt()).abs() < 1e-12);
        assert!((sz - 2f64.sqrt()).abs() < 1e-12);
        for t in [-3.0, -0.2, 0.7, 4.0] {
            let (a, _) = decode_scale([t, 0.0], &b);
            let (c, _) = decode_scale([-t, 0.0], &b);
            assert!((a - 1.0 / c).abs() < 1e-12);
        }
    }

    #[test]
    fn location_examples() {
        let r = car_bounds().regression();
        assert_eq!(r.d, [0.075; 3]);
        assert_eq!(decode_location([0.0; 3], &r), Point3::ORIGIN);
        assert!((decode_location([LN3, 0.0, 0.0], &r).x - 0.0375).abs() < 1e-15);
        assert!(decode_location([1e3, 0.0, 0.0], &r).x <= 0.075);
        assert!(decode_location([30.0, 0.0, 0.0], &r).x < 0.075);
    }

    #[test]
    fn unbounded_inverts_bounded() {
        for v in [-0.07, -0.01, 0.0, 0.03, 0.0749] {
            let t = unbounded(v, 0.075);
            assert!((bounded(t, 0.075) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_encode_at_centers() {
        let bins = RotationBins::default();
        for k in 0..12 {
            let (bin, res) = encode_rotation(bins.center(k), &bins);
            assert_eq!(bin, k);
            assert!(res.abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_encode_small_angle() {
        let bins = RotationBins::new(12).unwrap();
        let (bin, res) = encode_rotation(0.01, &bins);
        assert_eq!(bin, 0);
        let hw = PI / 24.0;
        assert!((res - (0.01 - hw) / hw).abs() < 1e-12);
    }

    #[test]
    fn rotation_encode_is_pi_periodic() {
        let bins = RotationBins::default();
        for theta in [0.0, 0.3, 1.2, 2.9, -0.4, -2.0] {
            let (a, ra) = encode_rotation(theta, &bins);
            let (b, rb) = encode_rotation(theta + PI, &bins);
            assert_eq!(a, b);
            assert!((ra - rb).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_decode_one_hot() {
        let bins = RotationBins::default();
        for k in 0..12 {
            let mut cls = vec![0.0; 12];
            cls[k] = 5.0;
            assert!((decode_rotation(&cls, &[0.0; 12], &bins) - bins.center(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_decode_tie_breaks_low() {
        let bins = RotationBins::default();
        let theta = decode_rotation(&[0.25; 12], &[0.0; 12], &bins);
        assert!((theta - PI / 24.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_bins() {
        assert_eq!(RotationBins::new(1), Err(TooFewBins(1)));
        assert!(RotationBins::new(2).is_ok());
    }

    #[test]
    fn size_examples() {
        let car = SizeAnchor::CAR;
        assert_eq!(decode_size([0.0; 3], &car), Size3::new(1.50, 1.57, 3.33));
        let s = decode_size([0.0, 0.0, 2f64.ln()], &car);
        assert!((s.l - 6.66).abs() < 1e-12);
        let t = [0.12, -0.3, 0.05];
        let back = encode_size(decode_size(t, &car), &car);
        for i in 0..3 {
            assert!((back[i] - t[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_output_split() {
        let bins = RotationBins::new(4).unwrap();
        let raw: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let out = RawBoxOutput::split(&raw, &bins).unwrap();
        assert_eq!(out.location, [0.0, 1.0, 2.0]);
        assert_eq!(out.rot_cls, &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(out.rot_reg, &[7.0, 8.0, 9.0, 10.0]);
        assert_eq!(out.size, [11.0, 12.0, 13.0]);
        assert!(RawBoxOutput::split(&raw[..13], &bins).is_none());
    }

    fn central_diff(f: impl Fn(f64) -> f64, t: f64) -> f64 {
        let h = 1e-4;
        (f(t + h) - f(t - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    proptest! {
        #[test]
        fn decodes_stay_in_open_ranges(t in -100.0..100.0f64) {
            let b = car_bounds();
            let r = b.regression();
            prop_assert!(bounded(t, 0.15).abs() <= 0.15);
            prop_assert!(decode_location([t, t, t], &r).x.abs() <= 0.075);
            prop_assert!(decode_rotation_transform(t, &b).abs() <= PI / 4.0);
            let (sxy, sz) = decode_scale([t, t], &b);
            prop_assert!((0.5..=2.0).contains(&sxy) && (0.5..=2.0).contains(&sz));
            prop_assert!(decode_size([t.min(5.0), 0.0, 0.0], &SizeAnchor::CAR).h > 0.0);
        }

        #[test]
        fn decodes_strictly_inside_for_moderate_inputs(t in -30.0..30.0f64) {
            let b = car_bounds();
            prop_assert!(bounded(t, 0.15).abs() < 0.15);
            let (sxy, _) = decode_scale([t, 0.0], &b);
            prop_assert!(sxy > 0.5 && sxy < 2.0);
        }

        #[test]
        fn analytic_derivatives_match_finite_differences(t in -6.0..6.0f64) {
            let b = car_bounds();
            let r = b.regression();
            prop_assert!(rel_err(bounded_grad(t, 0.15), central_diff(|u| bounded(u, 0.15), t)) < 1e-5);
            prop_assert!(rel_err(decode_location_grad([t; 3], &r)[1], central_diff(|u| decode_location([0.0, u, 0.0], &r).y, t)) < 1e-5);
            prop_assert!(rel_err(decode_rotation_transform_grad(t, &b), central_diff(|u| decode_rotation_transform(u, &b), t)) < 1e-5);
            prop_assert!(rel_err(decode_scale_grad([t, t], &b)[0], central_diff(|u| decode_scale([u, 0.0], &b).0, t)) < 1e-5);
            prop_assert!(rel_err(decode_scale_grad([t, t], &b)[1], central_diff(|u| decode_scale([0.0, u], &b).1, t)) < 1e-5);
            let anchor = SizeAnchor::CAR;
            prop_assert!(rel_err(anchor.l * libm::exp(t), central_diff(|u| decode_size([0.0, 0.0, u], &anchor).l, t)) < 1e-5);
        }

        #[test]
        fn rotation_codec_round_trip(theta in 0.0..PI, n in 2usize..40) {
            let bins = RotationBins::new(n).unwrap();
            let (bin, res) = encode_rotation(theta, &bins);
            prop_assert!(bin < n);
            prop_assert!((-1.0..=1.0).contains(&res));
            let mut cls = vec![0.0; n];
            cls[bin] = 1.0;
            let mut reg = vec![0.0; n];
            reg[bin] = res;
            let back = decode_rotation(&cls, &reg, &bins);
            // theta within 1e-9 of pi wraps to 0 legitimately
            let diff = (back - theta).abs().min(PI - (back - theta).abs());
            prop_assert!(diff < 1e-9, "{} vs {}", back, theta);
        }
    }
}
