use epbrm_core::oracle::{check_block, check_model};
use epbrm_core::network::Mechanism::{self, *};

#[test]
fn block_gradients_match_finite_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        match check_block(seed, 16, 1e-3) {
            Some(r) => {
                println!("block seed {seed}: params {:.2e} input {:.2e}", r.params, r.input);
                assert!(r.worst() < 1e-4, "seed {seed}: {r:?}");
                checked += 1;
            }
            None => println!("block seed {seed}: stencil crosses a switch, redrawn"),
        }
        seed += 1;
    }
    assert!(seed < 100, "too many redraws: {seed}");
}

/// Checks `count` instances from `first_seed` on, redrawing those whose
/// stencil crosses a switch.
fn check_all(mechanisms: &[Mechanism], first_seed: u64, count: usize) {
    let mut checked = 0;
    let mut seed = first_seed;
    while checked < count {
        match check_model(mechanisms, seed, 32, 1e-5) {
            Some(e) => {
                println!("{mechanisms:?} seed {seed}: {e:.2e}");
                assert!(e < 1e-4, "{mechanisms:?} seed {seed}: {e:.2e}");
                checked += 1;
            }
            None => println!("{mechanisms:?} seed {seed}: stencil crosses a switch, redrawn"),
        }
        seed += 1;
    }
    assert!(seed - first_seed < 5 * count as u64, "too many redraws");
}

#[test]
fn single_mechanisms() {
    for m in Mechanism::ALL {
        check_all(&[m], 0, 4);
    }
}

#[test]
fn ablation_combinations() {
    let combos: [&[Mechanism]; 6] =
        [&[], &[Translation], &[Centering], &[Translation, Rotation], &[Centering, Rotation], &[Centering, Scaling]];
    for c in combos {
        check_all(c, 10, 4);
    }
}

#[test]
fn centering_twenty_instances() {
    check_all(&[Centering], 0, 20);
}
