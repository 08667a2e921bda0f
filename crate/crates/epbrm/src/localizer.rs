//! Stand-in for an upstream detector: ground-truth centers with injected
//! noise, dropped objects, spurious detections and distance-driven scores.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use epbrm_core::{Box3D, Detection, ObjectClass, Point3, Size3};

use crate::dataset::Scene;
use crate::synth::GROUND_Z;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterNoise {
    /// Each component uniform in `[-h, h]`.
    Uniform { half_width: f64 },
    /// Isotropic normal with the given standard deviation.
    Gaussian { sigma: f64 },
}

impl CenterNoise {
    /// Scale of the score model: the half-width, or `2 sigma`.
    fn scale(self) -> f64 {
        match self {
            CenterNoise::Uniform { half_width } => half_width,
            CenterNoise::Gaussian { sigma } => 2.0 * sigma,
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> Point3 {
        match self {
            CenterNoise::Uniform { half_width: h } if h > 0.0 => {
                Point3::new(rng.random_range(-h..=h), rng.random_range(-h..=h), rng.random_range(-h..=h))
            }
            CenterNoise::Gaussian { sigma } if sigma > 0.0 => {
                let n = Normal::new(0.0, sigma).expect("valid sigma");
                Point3::new(n.sample(rng), n.sample(rng), n.sample(rng))
            }
            _ => Point3::ORIGIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerSpec {
    pub noise: CenterNoise,
    /// Probability that an object is missed.
    pub fn_rate: f64,
    /// Probability that a scene gets one spurious detection.
    pub fp_rate: f64,
    /// Standard deviation of the score jitter.
    pub score_jitter: f64,
}

impl LocalizerSpec {
    pub fn uniform(half_width: f64) -> Self {
        LocalizerSpec { noise: CenterNoise::Uniform { half_width }, fn_rate: 0.0, fp_rate: 0.0, score_jitter: 0.05 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        let noise_ok = match self.noise {
            CenterNoise::Uniform { half_width } => half_width >= 0.0 && half_width.is_finite(),
            CenterNoise::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
        };
        if !rate(self.fn_rate) || !rate(self.fp_rate) {
            return Err("localizer rates must lie in [0, 1]".into());
        }
        if !noise_ok || !(self.score_jitter >= 0.0) {
            return Err("localizer noise parameters must be non-negative".into());
        }
        Ok(())
    }

    fn score(&self, noise: Point3, rng: &mut ChaCha8Rng) -> f64 {
        let s = self.noise.scale();
        let base = if s > 0.0 { (1.0 - noise.norm() / (2.0 * s)).clamp(0.0, 1.0) } else { 1.0 };
        let jitter = if self.score_jitter > 0.0 {
            Normal::new(0.0, self.score_jitter).expect("valid sigma").sample(rng)
        } else {
            0.0
        };
        (base + jitter).clamp(0.0, 1.0)
    }
}

/// Detections of `class` objects in ground-truth order, followed by any
/// false positive. Spurious locations sit at object height in free space
/// within the span of the scene's objects.
pub fn simulate_localizer(scene: &Scene, class: ObjectClass, spec: &LocalizerSpec, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let mut out = Vec::new();
    for g in scene.objects_of(class) {
        if spec.fn_rate > 0.0 && rng.random_bool(spec.fn_rate) {
            continue;
        }
        let n = spec.noise.sample(rng);
        let score = spec.score(n, rng);
        out.push(Detection { location: g.bbox.center + n, score, bbox: None });
    }
    if spec.fp_rate > 0.0 && rng.random_bool(spec.fp_rate) {
        let z = GROUND_Z + 0.5 * class.anchor().h;
        let radius = class.sampling_region().radius;
        for _ in 0..100 {
            let p = Point3::new(rng.random_range(5.0..40.0), rng.random_range(-20.0..20.0), z);
            let free = scene.ground_truths.iter().all(|g| (g.bbox.center - p).bev_norm() > 2.0 * radius);
            if free {
                let far = Point3::new(spec.noise.scale() * 2.0, 0.0, 0.0);
                let score = spec.score(far, rng);
                out.push(Detection { location: p, score, bbox: None });
                break;
            }
        }
    }
    out
}

/// The box a localizer's point proposal stands for: anchor size and a fixed
/// yaw at the proposal location.
pub fn proposal_box(det: &Detection, class: ObjectClass, yaw: f64) -> Box3D {
    let a = class.anchor();
    Box3D::new(det.location, Size3::new(a.h, a.w, a.l), yaw).expect("anchor sizes are positive")
}

/// Median ground-truth yaw of a class, 0 when there is none.
pub fn median_yaw<'a>(gts: impl IntoIterator<Item = &'a Box3D>) -> f64 {
    let mut yaws: Vec<f64> = gts.into_iter().map(|b| b.yaw).collect();
    if yaws.is_empty() {
        return 0.0;
    }
    yaws.sort_by(f64::total_cmp);
    yaws[yaws.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, scene_rng, SceneSpec};

    fn scene() -> Scene {
        generate_scene("s", &SceneSpec::new(ObjectClass::Car, 8), &mut scene_rng(3, 0)).unwrap()
    }

    #[test]
    fn zero_noise_hits_centers() {
        let s = scene();
        let d = simulate_localizer(&s, ObjectClass::Car, &LocalizerSpec::uniform(0.0), &mut scene_rng(1, 1));
        assert_eq!(d.len(), s.ground_truths.len());
        for (d, g) in d.iter().zip(&s.ground_truths) {
            assert_eq!(d.location, g.bbox.center);
        }
    }

    #[test]
    fn uniform_support() {
        let s = scene();
        let mut rng = scene_rng(1, 2);
        for _ in 0..200 {
            let d = simulate_localizer(&s, ObjectClass::Car, &LocalizerSpec::uniform(0.15), &mut rng);
            for (d, g) in d.iter().zip(&s.ground_truths) {
                let o = d.location - g.bbox.center;
                assert!(o.x.abs() <= 0.15 && o.y.abs() <= 0.15 && o.z.abs() <= 0.15);
                assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn full_miss_rate_leaves_false_positives() {
        let s = scene();
        let spec = LocalizerSpec { fn_rate: 1.0, fp_rate: 1.0, ..LocalizerSpec::uniform(0.1) };
        let d = simulate_localizer(&s, ObjectClass::Car, &spec, &mut scene_rng(1, 3));
        assert_eq!(d.len(), 1);
        assert!(s.ground_truths.iter().all(|g| (g.bbox.center - d[0].location).bev_norm() > 4.0));
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(LocalizerSpec { fn_rate: 1.5, ..LocalizerSpec::uniform(0.1) }.validate().is_err());
        assert!(LocalizerSpec::uniform(-0.1).validate().is_err());
    }
}
