use std::fs;
use std::path::PathBuf;

use epbrm::kitti::{self, read_calib, read_labels, read_predictions, write_predictions, FormatError, PredictionEntry};
use epbrm_core::{Box3D, Detection, ObjectClass, Point3, Size3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d)
}

#[test]
fn golden_label_conversion() {
    let calib = read_calib(&fixture("calib_000000.txt")).unwrap();
    let gts = read_labels(&fixture("label_000000.txt"), &calib).unwrap();
    let expected: Vec<(ObjectClass, Box3D)> = fs::read_to_string(fixture("expected_000000.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let v: Vec<f64> = f[1..].iter().map(|s| s.parse().unwrap()).collect();
            let b = Box3D::new(Point3::new(v[0], v[1], v[2]), Size3::new(v[3], v[4], v[5]), v[6]).unwrap();
            (f[0].parse().unwrap(), b)
        })
        .collect();
    assert_eq!(gts.len(), expected.len(), "Van and DontCare are skipped");
    for (g, (class, b)) in gts.iter().zip(&expected) {
        assert_eq!(g.class, *class);
        assert!(g.bbox.center.distance(b.center) < 1e-4, "{:?} vs {:?}", g.bbox.center, b.center);
        assert_eq!(g.bbox.size, b.size);
        assert!(angle_diff(g.bbox.yaw, b.yaw) < 1e-4, "{} vs {}", g.bbox.yaw, b.yaw);
    }
    assert_eq!(gts[1].occlusion, 1);
    assert_eq!(gts[3].truncation, 0.32);
    assert!((gts[0].height_px.unwrap() - (224.74 - 174.59)).abs() < 1e-9);
}

fn random_entries(n: usize, rng: &mut ChaCha8Rng) -> Vec<PredictionEntry> {
    (0..n)
        .map(|_| {
            let c = Point3::new(rng.random_range(2.0..60.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..0.5));
            let s = Size3::new(rng.random_range(0.5..3.0), rng.random_range(0.4..2.5), rng.random_range(0.5..5.0));
            let b = Box3D::new(c, s, rng.random_range(-3.14..3.14)).unwrap();
            let class = ObjectClass::ALL[rng.random_range(0..3)];
            PredictionEntry { class, detection: Detection::new(c, rng.random_range(0.0..=1.0)).unwrap().with_box(b) }
        })
        .collect()
}

#[test]
fn prediction_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for calib in [kitti::Calibration::CANONICAL, read_calib(&fixture("calib_000000.txt")).unwrap()] {
        let entries = random_entries(100, &mut rng);
        write_predictions(&p, &entries, &calib).unwrap();
        let back = read_predictions(&p, &calib).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in entries.iter().zip(&back) {
            let (x, y) = (a.detection.bbox.unwrap(), b.detection.bbox.unwrap());
            assert_eq!(a.class, b.class);
            assert!((a.detection.score - b.detection.score).abs() <= 1e-6);
            for (u, v) in x.center.to_array().iter().zip(y.center.to_array()) {
                assert!((u - v).abs() <= 1e-6, "{:?} {:?}", x.center, y.center);
            }
            for (u, v) in x.size.to_array().iter().zip(y.size.to_array()) {
                assert!((u - v).abs() <= 1e-6);
            }
            assert!(angle_diff(x.yaw, y.yaw) <= 1e-6);
        }
    }
}

#[test]
fn empty_prediction_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    fs::write(&p, "").unwrap();
    assert!(read_predictions(&p, &kitti::Calibration::CANONICAL).unwrap().is_empty());
}

#[test]
fn prediction_without_score_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    fs::write(
        &p,
        "Car 0.00 0 0.0 -1 -1 -1 -1 1.5 1.6 3.9 0.0 1.0 10.0 0.1 0.9\n\
         Car 0.00 0 0.0 -1 -1 -1 -1 1.5 1.6 3.9 0.0 1.0 10.0 0.1\n",
    )
    .unwrap();
    match read_predictions(&p, &kitti::Calibration::CANONICAL) {
        Err(FormatError::Parse { line: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn labels_reject_bad_numbers_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.txt");
    fs::write(
        &p,
        "Car 0.00 0 -1.56 564.62 174.59 616.43 224.74 1.61 1.66 3.20 -0.69 1.69 25.01 -1.59\n\
         Car 0.00 0 -1.56 564.62 174.59 616.43 224.74 1.61 wide 3.20 -0.69 1.69 25.01 -1.59\n",
    )
    .unwrap();
    let err = read_labels(&p, &kitti::Calibration::CANONICAL).unwrap_err();
    assert!(err.to_string().contains(":2:"), "{err}");
}

#[test]
fn missing_calibration_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    fs::write(&p, "R0_rect: 1 0 0 0 1 0 0 0 1\n").unwrap();
    assert!(matches!(read_calib(&p), Err(FormatError::Calib { .. })));
}
