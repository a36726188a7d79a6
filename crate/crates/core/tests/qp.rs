use drift_core::qp::{kkt_residual, solve_dense, two_sided, QpOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{enumerate_box, objective, random_spd};

#[test]
fn unconstrained_instances_match_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=12);
        let h = random_spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let c = DMatrix::zeros(0, n);
        let b = DVector::zeros(0);
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        let want = h.clone().lu().solve(&(-&g)).unwrap();
        assert!((&sol.x - &want).amax() < 1e-8, "n = {n}");
        assert!(sol.active.is_empty());
    }
}

#[test]
fn box_instances_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let n = rng.gen_range(1..=6);
        let h = random_spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let lo: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.1..1.5)).collect();
        let (c, b) = two_sided(
            &DMatrix::identity(n, n),
            &DVector::from_vec(lo.clone()),
            &DVector::from_vec(hi.clone()),
        );
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        let want = enumerate_box(&h, &g, &lo, &hi);
        let got = objective(&h, &g, &sol.x);
        assert!((got - want).abs() < 1e-8, "case {case}: {got} vs {want}");
        assert!(kkt_residual(&h, &g, &c, &b, &sol.x, &sol.multipliers) < 1e-6);
    }
}

#[test]
fn general_inequalities_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(1..=2 * n);
        let h = random_spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        // Origin strictly feasible, so the problem is feasible.
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..-0.1));
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(kkt_residual(&h, &g, &c, &b, &sol.x, &sol.multipliers) < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solution_is_no_worse_than_feasible_samples(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=5);
        let h = random_spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let lo = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..0.0));
        let hi = DVector::from_fn(n, |i, _| lo[i] + rng.gen_range(0.1..1.0));
        let (c, b) = two_sided(&DMatrix::identity(n, n), &lo, &hi);
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        let best = objective(&h, &g, &sol.x);
        for _ in 0..50 {
            let x = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..hi[i]));
            prop_assert!(best <= objective(&h, &g, &x) + 1e-9);
        }
    }
}
