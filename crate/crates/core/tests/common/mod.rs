//! Oracles shared by the integration tests.
#![allow(dead_code)]

use drift_core::dynamics::VehicleParams;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Independent scalar model used as the finite-difference oracle; the input
/// vector is `[V, beta, r, delta, F_xr in kN]`.
pub fn oracle(p: &VehicleParams, x: [f64; 5]) -> [f64; 5] {
    let [v, beta, r, delta, fk] = x;
    let fx = fk * 1000.0;
    let l = p.a + p.b;
    let fzf = p.mass * p.gravity * p.b / l;
    let fzr = p.mass * p.gravity * p.a / l;
    let af = ((v * beta.sin() + p.a * r) / (v * beta.cos())).atan() - delta;
    let ar = ((v * beta.sin() - p.b * r) / (v * beta.cos())).atan();
    let fyf = -p.mu * fzf * (p.tire_c * (p.tire_b * af).atan()).sin();
    let fyr = -p.mu * fzr * (p.tire_c * (p.tire_b * ar).atan()).sin();
    [
        (-fyf * (delta - beta).sin() + fyr * beta.sin() + fx * beta.cos()) / p.mass,
        (fyf * (delta - beta).cos() + fyr * beta.cos() - fx * beta.sin()) / (p.mass * v) - r,
        (p.a * fyf * delta.cos() - p.b * fyr) / p.yaw_inertia,
        0.0,
        0.0,
    ]
}

pub fn oracle_jacobian(p: &VehicleParams, x: [f64; 5]) -> [[f64; 5]; 5] {
    let mut jac = [[0.0; 5]; 5];
    for j in 0..5 {
        let h = 1e-5 * x[j].abs().max(1.0);
        let (mut xp, mut xm) = (x, x);
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (oracle(p, xp), oracle(p, xm));
        for i in 0..5 {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

pub fn objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

/// Exact box-QP oracle: every lower/upper/free assignment, solve the reduced
/// stationarity system, keep feasible points, return the best objective.
pub fn enumerate_box(h: &DMatrix<f64>, g: &DVector<f64>, lo: &[f64], hi: &[f64]) -> f64 {
    let n = g.len();
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut x = DVector::zeros(n);
        let mut free = Vec::new();
        let mut c = code;
        for i in 0..n {
            match c % 3 {
                0 => x[i] = lo[i],
                1 => x[i] = hi[i],
                _ => free.push(i),
            }
            c /= 3;
        }
        if !free.is_empty() {
            let k = free.len();
            let hff = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(k, |a, _| {
                let i = free[a];
                -g[i] - (0..n).filter(|j| !free.contains(j)).map(|j| h[(i, j)] * x[j]).sum::<f64>()
            });
            let Some(xf) = hff.cholesky().map(|ch| ch.solve(&rhs)) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                x[i] = xf[a];
            }
        }
        if (0..n).all(|i| x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12) {
            best = best.min(objective(h, g, &x));
        }
    }
    best
}
