use approx::assert_abs_diff_eq;
use drift_core::dynamics::{step, ControlInput, DriftState, Pose, VehicleParams};
use drift_core::equilibria::{
    linear_model, linearize, mirror, solve_equilibrium, TurnDirection, Vector5, FORCE_SCALE,
};
use nalgebra::SVector;
use proptest::prelude::*;

mod common;
use common::{oracle, oracle_jacobian};

#[test]
fn equilibrium_matches_geometry_and_conventions() {
    let p = VehicleParams::default();
    let eq = solve_equilibrium(&p, 19.1, 44.0, TurnDirection::LeftHanded).unwrap();
    assert_abs_diff_eq!(eq.r, 19.1 / 44.0, epsilon = 1e-12);
    assert!(eq.residual(&p).unwrap() < 1e-8);
    // Left-handed: positive yaw rate, sideslip opposing it, counter-steer.
    assert!(eq.beta < 0.0 && eq.delta < 0.0 && eq.f_xr > 0.0);
    let rates = oracle(&p, eq.augmented().into());
    assert!(rates.iter().all(|v| v.abs() < 1e-8));

    let right = solve_equilibrium(&p, 19.1, 44.0, TurnDirection::RightHanded).unwrap();
    let m = mirror(&eq);
    for (a, b) in [
        (right.v, m.v),
        (right.beta, m.beta),
        (right.r, m.r),
        (right.delta, m.delta),
        (right.f_xr / FORCE_SCALE, m.f_xr / FORCE_SCALE),
    ] {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
    assert!(m.residual(&p).unwrap() < 1e-8);
}

#[test]
fn jacobian_matches_finite_difference_oracle() {
    let p = VehicleParams::default();
    for dir in [TurnDirection::LeftHanded, TurnDirection::RightHanded] {
        let eq = solve_equilibrium(&p, 19.1, 44.0, dir).unwrap();
        let (a, b) = linearize(&eq, &p).unwrap();
        let want = oracle_jacobian(&p, eq.augmented().into());
        for i in 0..5 {
            for j in 0..5 {
                let tol = (1e-3 * want[i][j].abs()).max(1e-6);
                assert!(
                    (a[(i, j)] - want[i][j]).abs() <= tol,
                    "A[{i},{j}] = {} vs {}",
                    a[(i, j)],
                    want[i][j]
                );
            }
        }
        for j in 0..5 {
            assert_eq!(a[(3, j)], 0.0);
            assert_eq!(a[(4, j)], 0.0);
        }
        assert_eq!(b[(3, 0)], 1.0);
        assert_eq!(b[(4, 1)], 1.0);
        assert_eq!(b.rows(0, 3).amax(), 0.0);
    }
}

#[test]
fn linear_model_tracks_one_plant_step() {
    // Forward Euler plus linearization: the one-step mismatch against the
    // RK4 plant is second order in the step and small against the deviation.
    let p = VehicleParams::default();
    let eq = solve_equilibrium(&p, 19.1, 44.0, TurnDirection::LeftHanded).unwrap();
    let mismatch = |dev: &Vector5, dt: f64| {
        let model = linear_model(&eq, &p, dt).unwrap();
        let x = eq.augmented() + dev;
        let (s1, _) = step(
            &DriftState::new(x[0], x[1], x[2]),
            &Pose::new(0.0, 0.0, 0.0),
            &ControlInput::new(x[3], x[4] * FORCE_SCALE),
            &p,
            dt,
        )
        .unwrap();
        let plant = Vector5::new(s1.v, s1.beta, s1.r, x[3], x[4]) - eq.augmented();
        (plant - model.predict(dev, &SVector::<f64, 2>::zeros())).amax()
    };
    for dev in [
        Vector5::new(2e-3, 0.0, 0.0, 0.0, 0.0),
        Vector5::new(0.0, -1e-4, 0.0, 0.0, 0.0),
        Vector5::new(0.0, 0.0, 1e-4, 0.0, 0.0),
        Vector5::new(0.0, 0.0, 0.0, 1e-4, 0.0),
        Vector5::new(0.0, 0.0, 0.0, 0.0, 1e-3),
    ] {
        let e1 = mismatch(&dev, 0.05);
        let e2 = mismatch(&dev, 0.025);
        assert!(e1 <= 0.1 * dev.amax(), "dev {dev:?}: error {e1}");
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.0, "dev {dev:?}: ratio {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solved_equilibria_are_consistent(v in 15.0f64..24.0, radius in 38.0f64..60.0) {
        let p = VehicleParams::default();
        // Stay below the friction-limited lateral acceleration.
        prop_assume!(v * v / radius < 0.9 * p.mu * p.gravity);
        if let Ok(eq) = solve_equilibrium(&p, v, radius, TurnDirection::LeftHanded) {
            prop_assert!((eq.v - eq.r.abs() * radius).abs() <= 1e-6 * v);
            prop_assert!(eq.residual(&p).unwrap() < 1e-8);
            prop_assert!(eq.beta < 0.0);
            prop_assert!(eq.delta.signum() == eq.beta.signum());
            let m = mirror(&eq);
            prop_assert!(m.residual(&p).unwrap() < 1e-8);
            prop_assert!((m.beta + eq.beta).abs() < 1e-15 && (m.r + eq.r).abs() < 1e-15);
        }
    }
}
