mod common;

use common::gradcheck::{end_to_end_check, op_checks};

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_checks();
    for c in &checks {
        println!("{:<32} rel err {:.2e} (tol {:.0e})", c.name, c.rel_err, c.tol);
    }
    let failed: Vec<_> = checks.into_iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn tiny_model_matches_finite_differences() {
    for seed in [1, 2] {
        let c = end_to_end_check(20, seed);
        println!("{} seed {seed}: rel err {:.2e}", c.name, c.rel_err);
        assert!(c.passed(), "{c:?}");
    }
}

#[test]
fn harness_flags_a_wrong_gradient() {
    use common::gradcheck::{check, random, TOL_SMOOTH};
    use rand::SeedableRng;
    use wavetag::diffops;

    let x = random(&[3, 4], &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
    let c = check(
        "sigmoid with a halved gradient",
        TOL_SMOOTH,
        vec![x],
        1,
        |x| diffops::sigmoid(&x[0]),
        |x, g| vec![diffops::sigmoid_backward(&diffops::sigmoid(&x[0]), g).unwrap().map(|v| v * 0.5)],
    );
    assert!(!c.passed(), "{c:?}");
}
