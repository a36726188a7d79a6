//! Sustained-drift equilibria and the per-phase linear model used by the MPC.
//!
//! Sign convention: a left-handed (counter-clockwise) drift has `r > 0`. On
//! the drift branch the sideslip opposes the rotation (`beta < 0` for `r > 0`)
//! and the steering is counter-steered, carrying the same sign as `beta`.
//!
//! The augmented state is `xi = [V, beta, r, delta, F_xr]` with `F_xr`
//! expressed in kN; the inputs are the per-step increments of `delta` and
//! `F_xr` (kN).

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{state_derivative, ControlInput, DriftState, VehicleParams};
use crate::error::{Error, Result};

pub type Vector5 = SVector<f64, 5>;
pub type Matrix5 = SMatrix<f64, 5, 5>;
pub type Matrix5x2 = SMatrix<f64, 5, 2>;

/// Solver-facing scale of the force coordinate.
pub const FORCE_SCALE: f64 = 1000.0;

/// Smallest |beta| accepted as a drift root.
pub const DRIFT_BETA_MIN: f64 = 0.1;

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-11;
const JACOBIAN_STEP: f64 = 1e-7;
const LINEARIZE_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnDirection {
    /// Counter-clockwise, positive yaw rate.
    LeftHanded,
    /// Clockwise, negative yaw rate.
    RightHanded,
}

impl TurnDirection {
    pub fn sign(self) -> f64 {
        match self {
            TurnDirection::LeftHanded => 1.0,
            TurnDirection::RightHanded => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            TurnDirection::LeftHanded => TurnDirection::RightHanded,
            TurnDirection::RightHanded => TurnDirection::LeftHanded,
        }
    }
}

impl std::str::FromStr for TurnDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" | "lefthanded" | "ccw" => Ok(TurnDirection::LeftHanded),
            "right" | "r" | "righthanded" | "cw" => Ok(TurnDirection::RightHanded),
            other => Err(Error::InvalidParameter(format!(
                "unknown turn direction `{other}` (expected left or right)"
            ))),
        }
    }
}

impl std::fmt::Display for TurnDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TurnDirection::LeftHanded => "left",
            TurnDirection::RightHanded => "right",
        })
    }
}

/// A sustained-drift fixed point of the three-state model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v: f64,
    pub beta: f64,
    pub r: f64,
    pub delta: f64,
    /// Rear longitudinal force [N].
    pub f_xr: f64,
    pub direction: TurnDirection,
    /// Drift radius [m].
    pub radius: f64,
}

impl Equilibrium {
    pub fn state(&self) -> DriftState {
        DriftState::new(self.v, self.beta, self.r)
    }

    pub fn input(&self) -> ControlInput {
        ControlInput::new(self.delta, self.f_xr)
    }

    /// Augmented state with the force in kN.
    pub fn augmented(&self) -> Vector5 {
        Vector5::new(self.v, self.beta, self.r, self.delta, self.f_xr / FORCE_SCALE)
    }

    /// Infinity norm of the model derivatives at this point.
    pub fn residual(&self, params: &VehicleParams) -> Result<f64> {
        Ok(state_derivative(&self.state(), &self.input(), params)?.max_abs())
    }
}

/// Reflects an equilibrium into the opposite turn direction.
pub fn mirror(eq: &Equilibrium) -> Equilibrium {
    Equilibrium {
        beta: -eq.beta,
        r: -eq.r,
        delta: -eq.delta,
        direction: eq.direction.flipped(),
        ..*eq
    }
}

fn residual_vec(
    params: &VehicleParams,
    v: f64,
    r: f64,
    unknowns: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let state = DriftState::new(v, unknowns[0], r);
    let u = ControlInput::new(unknowns[1], unknowns[2] * FORCE_SCALE);
    Ok(Vector3::from(state_derivative(&state, &u, params)?.to_array()))
}

fn newton(
    params: &VehicleParams,
    v: f64,
    r: f64,
    start: Vector3<f64>,
) -> Result<(Vector3<f64>, f64)> {
    let mut z = start;
    let mut res = residual_vec(params, v, r, &z)?;
    let mut norm = res.amax();
    for _ in 0..NEWTON_MAX_ITERS {
        if norm < NEWTON_TOL {
            return Ok((z, norm));
        }
        let mut jac = Matrix3::zeros();
        for j in 0..3 {
            let mut zp = z;
            zp[j] += JACOBIAN_STEP;
            let rp = residual_vec(params, v, r, &zp)?;
            jac.set_column(j, &((rp - res) / JACOBIAN_STEP));
        }
        let Some(dz) = jac.lu().solve(&(-res)) else {
            break;
        };
        // Backtracking keeps the iterate on the same root and away from
        // |beta| = pi/2.
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda > 1e-4 {
            let trial = z + dz * lambda;
            if trial[0].abs() < 1.4 {
                if let Ok(rt) = residual_vec(params, v, r, &trial) {
                    if rt.amax() < (1.0 - 1e-4 * lambda) * norm {
                        z = trial;
                        res = rt;
                        norm = rt.amax();
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm < NEWTON_TOL {
        Ok((z, norm))
    } else {
        Err(Error::NoConvergence {
            iterations: NEWTON_MAX_ITERS,
            residual: norm,
        })
    }
}

/// Solves for `(beta, delta, F_xr)` at yaw rate `r = +-V/R`.
///
/// Newton starts at `|beta| = 0.4`, `|delta| = 0.27` with the counter-steer
/// signs; if that start fails, a short list of deeper and shallower sideslip
/// starts is tried before giving up.
pub fn solve_equilibrium(
    params: &VehicleParams,
    v_target: f64,
    r_target: f64,
    direction: TurnDirection,
) -> Result<Equilibrium> {
    if !(v_target.is_finite() && v_target > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target speed must be > 0, got {v_target}"
        )));
    }
    if !(r_target.is_finite() && r_target > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target radius must be > 0, got {r_target}"
        )));
    }
    params.validate()?;
    let s = direction.sign();
    let r = s * v_target / r_target;
    let (_, f_zr) = vertical_loads_kn(params);
    let f0 = 0.3 * f_zr;

    let starts = [(0.4, 0.27), (0.5, 0.3), (0.3, 0.2), (0.6, 0.35), (0.8, 0.4)];
    let mut last_err = None;
    let mut grip_beta = None;
    for (beta0, delta0) in starts {
        let start = Vector3::new(-s * beta0, -s * delta0, f0);
        match newton(params, v_target, r, start) {
            Ok((z, _)) if z[0].abs() >= DRIFT_BETA_MIN => {
                return Ok(Equilibrium {
                    v: v_target,
                    beta: z[0],
                    r,
                    delta: z[1],
                    f_xr: z[2] * FORCE_SCALE,
                    direction,
                    radius: r_target,
                });
            }
            Ok((z, _)) => grip_beta = Some(z[0]),
            Err(e) => last_err = Some(e),
        }
    }
    match (grip_beta, last_err) {
        (Some(beta), _) => Err(Error::NonDriftBranch { beta: beta.abs() }),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start is always tried"),
    }
}

fn vertical_loads_kn(params: &VehicleParams) -> (f64, f64) {
    let (f, r) = crate::dynamics::vertical_loads(params);
    (f / FORCE_SCALE, r / FORCE_SCALE)
}

/// Augmented continuous dynamics: model rates on top, zero for the inputs.
pub fn augmented_rate(xi: &Vector5, params: &VehicleParams) -> Result<Vector5> {
    let d = state_derivative(
        &DriftState::new(xi[0], xi[1], xi[2]),
        &ControlInput::new(xi[3], xi[4] * FORCE_SCALE),
        params,
    )?;
    Ok(Vector5::new(d.dv, d.dbeta, d.dr, 0.0, 0.0))
}

/// Central-difference Jacobian `A_c` of the augmented dynamics and the
/// input map `B_c = [0; I]`.
pub fn linearize(eq: &Equilibrium, params: &VehicleParams) -> Result<(Matrix5, Matrix5x2)> {
    let xi = eq.augmented();
    let mut a = Matrix5::zeros();
    for j in 0..5 {
        let mut xp = xi;
        let mut xm = xi;
        xp[j] += LINEARIZE_STEP;
        xm[j] -= LINEARIZE_STEP;
        let col = (augmented_rate(&xp, params)? - augmented_rate(&xm, params)?)
            / (2.0 * LINEARIZE_STEP);
        a.set_column(j, &col);
    }
    let mut b = Matrix5x2::zeros();
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    Ok((a, b))
}

/// Forward-Euler discrete model around an equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a_d: Matrix5,
    pub b_d: Matrix5x2,
    pub dt: f64,
    pub origin: Equilibrium,
}

impl LinearModel {
    /// Input matrix for per-step increments: with `B_c = [0; I]` read as a
    /// rate map, an increment `d` applied over one step is the rate `d/dt`.
    pub fn increment_matrix(&self) -> Matrix5x2 {
        self.b_d / self.dt
    }

    /// One step of the deviation model `xi+ = A_d xi + B_inc d`.
    pub fn predict(&self, xi_dev: &Vector5, increment: &SVector<f64, 2>) -> Vector5 {
        self.a_d * xi_dev + self.increment_matrix() * increment
    }
}

pub fn discretize(
    a_c: &Matrix5,
    b_c: &Matrix5x2,
    dt: f64,
    origin: Equilibrium,
) -> Result<LinearModel> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sample time must be > 0, got {dt}"
        )));
    }
    Ok(LinearModel {
        a_d: Matrix5::identity() + a_c * dt,
        b_d: b_c * dt,
        dt,
        origin,
    })
}

/// Linearize and discretize in one call.
pub fn linear_model(eq: &Equilibrium, params: &VehicleParams, dt: f64) -> Result<LinearModel> {
    let (a, b) = linearize(eq, params)?;
    discretize(&a, &b, dt, *eq)
}
