//! Synthetic lidar scenes: hollow cuboids seen from a sensor at the origin,
//! a flat ground plane and random clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use epbrm_core::geometry::bev_intersection_area;
use epbrm_core::{Box3D, ObjectClass, Point3, PointCloud, Size3};

use crate::dataset::Scene;
use crate::kitti::GroundTruth;

/// Ground height below the sensor, as on the KITTI recording car.
pub const GROUND_Z: f64 = -1.73;
/// Sensor noise standard deviation in meters.
pub const NOISE_SIGMA: f64 = 0.02;
/// Focal length in pixels for the image-plane height estimate.
const FOCAL_PX: f64 = 721.5;
const PLACEMENT_TRIES: usize = 200;
/// Objects closer than this keep the full point budget.
const REFERENCE_RANGE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub class: ObjectClass,
    /// Objects are placed with `x` in `[min_range, extent]` and
    /// `|y| <= extent / 2`.
    pub extent: f64,
    pub min_range: f64,
    /// Surface points of an object at the reference range.
    pub points_per_object: usize,
    /// Fewest surface points an object gets however far it is.
    pub min_points: usize,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Clutter points per scene.
    pub clutter: usize,
}

impl SceneSpec {
    pub fn new(class: ObjectClass, n_objects: usize) -> Self {
        SceneSpec {
            n_objects,
            class,
            extent: 40.0,
            min_range: 5.0,
            points_per_object: 400,
            min_points: 60,
            ground_density: 0.5,
            clutter: 200,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.extent.is_finite()
            && self.min_range >= 0.0
            && self.extent > self.min_range
            && self.ground_density >= 0.0
            && self.ground_density.is_finite()
            && self.min_points <= self.points_per_object;
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec)
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec")]
    InvalidSpec,
    #[error("could not place {wanted} non-overlapping objects (placed {placed})")]
    Placement { wanted: usize, placed: usize },
}

fn sample_box(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Box3D {
    let a = spec.class.anchor();
    let mut jitter = |v: f64| v * rng.random_range(0.85..=1.15);
    let size = Size3::new(jitter(a.h), jitter(a.w), jitter(a.l));
    let x = rng.random_range(spec.min_range..=spec.extent);
    let y = rng.random_range(-0.5 * spec.extent..=0.5 * spec.extent);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3D::new(Point3::new(x, y, GROUND_Z + 0.5 * size.h), size, yaw).expect("positive size")
}

fn overlaps(a: &Box3D, others: &[Box3D]) -> bool {
    // a small gap keeps neighbouring shells from touching
    let grown = Box3D { size: Size3::new(a.size.h, a.size.w + 0.2, a.size.l + 0.2), ..*a };
    others.iter().any(|b| bev_intersection_area(&grown, b) > 0.0)
}

/// Face of a box in local coordinates: center, outward normal and the two
/// half-extent vectors spanning it.
fn faces(b: &Box3D) -> [(Point3, Point3, Point3, Point3); 6] {
    let (hw, hl, hh) = (0.5 * b.size.w, 0.5 * b.size.l, 0.5 * b.size.h);
    let x = Point3::new(1.0, 0.0, 0.0);
    let y = Point3::new(0.0, 1.0, 0.0);
    let z = Point3::new(0.0, 0.0, 1.0);
    [
        (x * hw, x, y * hl, z * hh),
        (x * -hw, x * -1.0, y * hl, z * hh),
        (y * hl, y, x * hw, z * hh),
        (y * -hl, y * -1.0, x * hw, z * hh),
        (z * hh, z, x * hw, y * hl),
        (z * -hh, z * -1.0, x * hw, y * hl),
    ]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a.x * b.x + a.y * b.y + a.z * b.z
}

/// Surface points on the faces visible from the origin.
pub fn object_points(b: &Box3D, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let sensor = b.to_local(Point3::ORIGIN);
    let visible: Vec<_> = faces(b)
        .into_iter()
        .filter(|(c, n, _, _)| dot(*n, sensor - *c) > 0.0)
        .map(|f| (f, 4.0 * f.2.norm() * f.3.norm()))
        .collect();
    let total: f64 = visible.iter().map(|(_, a)| a).sum();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random_range(0.0..total);
        let mut face = visible[0].0;
        for (f, a) in &visible {
            face = *f;
            if pick < *a {
                break;
            }
            pick -= a;
        }
        let (c, _, u, v) = face;
        let local = c + u * rng.random_range(-1.0..=1.0) + v * rng.random_range(-1.0..=1.0);
        let n = Point3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        out.push(local.rotate_z(b.yaw) + b.center + n);
    }
    out
}

fn point_budget(spec: &SceneSpec, b: &Box3D) -> usize {
    let range = b.center.bev_norm().max(REFERENCE_RANGE);
    let n = spec.points_per_object as f64 * (REFERENCE_RANGE / range).powi(2);
    (n.round() as usize).max(spec.min_points)
}

/// Deterministic in `(spec, rng state)`. Ground and clutter points never
/// fall inside an object's footprint.
pub fn generate_scene(id: &str, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene, SynthError> {
    spec.validate()?;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.n_objects);
    let mut tries = 0;
    while boxes.len() < spec.n_objects {
        if tries == PLACEMENT_TRIES * spec.n_objects {
            return Err(SynthError::Placement { wanted: spec.n_objects, placed: boxes.len() });
        }
        tries += 1;
        let b = sample_box(spec, rng);
        if !overlaps(&b, &boxes) {
            boxes.push(b);
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        let n = point_budget(spec, b);
        points.extend(object_points(b, n, rng));
    }
    let free = |p: Point3, boxes: &[Box3D]| {
        boxes.iter().all(|b| {
            let q = b.to_local(Point3::new(p.x, p.y, b.center.z));
            q.x.abs() > 0.5 * b.size.w + 0.1 || q.y.abs() > 0.5 * b.size.l + 0.1
        })
    };
    let (x0, x1) = (0.0, spec.extent + 5.0);
    let (y0, y1) = (-0.5 * spec.extent - 5.0, 0.5 * spec.extent + 5.0);
    let n_ground = (spec.ground_density * (x1 - x0) * (y1 - y0)).round() as usize;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for _ in 0..n_ground {
        let p = Point3::new(rng.random_range(x0..x1), rng.random_range(y0..y1), GROUND_Z + noise.sample(rng));
        if free(p, &boxes) {
            points.push(p);
        }
    }
    for _ in 0..spec.clutter {
        let p = Point3::new(
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            rng.random_range(GROUND_Z..GROUND_Z + 3.0),
        );
        if free(p, &boxes) {
            points.push(p);
        }
    }

    let ground_truths = boxes
        .into_iter()
        .map(|bbox| GroundTruth {
            class: spec.class,
            bbox,
            truncation: 0.0,
            occlusion: 0,
            height_px: Some(FOCAL_PX * bbox.size.h / bbox.center.x.max(1.0)),
        })
        .collect();
    Ok(Scene { id: id.to_string(), cloud: PointCloud::new(points), ground_truths })
}

/// Scene `i` of a dataset uses its own stream of `seed`, so scenes can be
/// generated in any order.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn generate_scenes(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Scene>, SynthError> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(&scene_id(i), spec, &mut scene_rng(seed, i as u64)))
        .collect()
}
