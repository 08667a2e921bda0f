use epbrm_core::geometry::iou_3d;
use epbrm_core::oracle::monte_carlo_iou;
use epbrm_core::{Box3D, Point3, Size3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_pair(rng: &mut ChaCha8Rng) -> (Box3D, Box3D) {
    let size = |rng: &mut ChaCha8Rng| Size3::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..4.5));
    let a = Box3D::new(
        Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
        size(rng),
        rng.random_range(-3.2..3.2),
    )
    .unwrap();
    let shift = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    let b = Box3D::new(a.center + shift, size(rng), rng.random_range(-3.2..3.2)).unwrap();
    (a, b)
}

#[test]
fn rotated_iou_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (a, b) = random_pair(&mut rng);
        let exact = iou_3d(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, &mut rng);
        worst = worst.max((exact - mc).abs());
        assert!((exact - mc).abs() < 5e-3, "pair {i}: exact {exact} vs mc {mc}");
    }
    println!("worst |exact - mc| = {worst:.2e}");
}
