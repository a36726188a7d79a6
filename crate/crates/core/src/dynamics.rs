//! Three-state drift vehicle model with a simplified Pacejka lateral tire,
//! world-frame pose kinematics and a fixed-step RK4 plant integrator.
//!
//! State is `(V, beta, r)` at the center of gravity. Drive and brake act only
//! on the rear axle (`F_xr`), vertical loads are the static axle split and the
//! tire has no combined-slip coupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this speed the model divides by (nearly) zero.
pub const MIN_SPEED: f64 = 0.1;

/// Physical parameters of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Mass [kg].
    pub mass: f64,
    /// Yaw inertia [kg m^2].
    pub yaw_inertia: f64,
    /// CoG to front axle [m].
    pub a: f64,
    /// CoG to rear axle [m].
    pub b: f64,
    /// Tire-road friction coefficient.
    pub mu: f64,
    /// Pacejka stiffness factor B.
    pub tire_b: f64,
    /// Pacejka shape factor C, in (1, 2].
    pub tire_c: f64,
    /// Gravitational acceleration [m/s^2].
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            yaw_inertia: 2500.0,
            a: 1.2,
            b: 1.3,
            mu: 0.85,
            tire_b: 10.0,
            tire_c: 1.48,
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("a", self.a),
            ("b", self.b),
            ("mu", self.mu),
            ("tire_b", self.tire_b),
            ("tire_c", self.tire_c),
            ("gravity", self.gravity),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "vehicle.{name} must be finite and > 0, got {value}"
                )));
            }
        }
        if !(self.tire_c > 1.0 && self.tire_c <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "vehicle.tire_c must lie in (1, 2], got {}",
                self.tire_c
            )));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }
}

/// Dynamic states at the center of gravity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftState {
    /// Speed [m/s].
    pub v: f64,
    /// Sideslip angle [rad].
    pub beta: f64,
    /// Yaw rate [rad/s].
    pub r: f64,
}

impl DriftState {
    pub fn new(v: f64, beta: f64, r: f64) -> Self {
        Self { v, beta, r }
    }

    /// Left/right reflection: same speed, opposite sideslip and yaw rate.
    pub fn mirrored(&self) -> Self {
        Self::new(self.v, -self.beta, -self.r)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.beta.is_finite() && self.r.is_finite()
    }
}

/// World-frame position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    /// East [m].
    pub x: f64,
    /// North [m].
    pub y: f64,
    /// Heading [rad], kept in (-pi, pi].
    pub psi: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }
}

/// Steering angle and rear longitudinal force.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Steering angle [rad].
    pub delta: f64,
    /// Rear longitudinal tire force [N].
    pub f_xr: f64,
}

impl ControlInput {
    pub fn new(delta: f64, f_xr: f64) -> Self {
        Self { delta, f_xr }
    }
}

/// Time derivative of [`DriftState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateRate {
    pub dv: f64,
    pub dbeta: f64,
    pub dr: f64,
}

impl StateRate {
    pub fn max_abs(&self) -> f64 {
        self.dv.abs().max(self.dbeta.abs()).max(self.dr.abs())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dv, self.dbeta, self.dr]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Static front/rear axle loads `(F_zf, F_zr)`.
pub fn vertical_loads(params: &VehicleParams) -> (f64, f64) {
    let weight = params.mass * params.gravity;
    let l = params.wheelbase();
    (weight * params.b / l, weight * params.a / l)
}

/// Front and rear tire slip angles `(alpha_f, alpha_r)`.
pub fn slip_angles(state: &DriftState, delta: f64, params: &VehicleParams) -> Result<(f64, f64)> {
    let vx = state.v * state.beta.cos();
    if vx.abs() < 1e-9 {
        return Err(Error::DegenerateState(format!(
            "V cos(beta) = {vx:e} (V = {}, beta = {})",
            state.v, state.beta
        )));
    }
    let vy = state.v * state.beta.sin();
    let alpha_f = ((vy + params.a * state.r) / vx).atan() - delta;
    let alpha_r = ((vy - params.b * state.r) / vx).atan();
    Ok((alpha_f, alpha_r))
}

/// Simplified magic formula: `-mu F_z sin(C atan(B alpha))`.
pub fn lateral_tire_force(alpha: f64, f_z: f64, params: &VehicleParams) -> f64 {
    -params.mu * f_z * (params.tire_c * (params.tire_b * alpha).atan()).sin()
}

/// Right-hand side of the three-state model.
pub fn state_derivative(
    state: &DriftState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<StateRate> {
    if !(state.v > MIN_SPEED) {
        return Err(Error::DegenerateState(format!(
            "speed {} below the {MIN_SPEED} m/s model floor",
            state.v
        )));
    }
    let (f_zf, f_zr) = vertical_loads(params);
    let (alpha_f, alpha_r) = slip_angles(state, u.delta, params)?;
    let f_yf = lateral_tire_force(alpha_f, f_zf, params);
    let f_yr = lateral_tire_force(alpha_r, f_zr, params);

    let DriftState { v, beta, r } = *state;
    let (sb, cb) = beta.sin_cos();
    let (sdb, cdb) = (u.delta - beta).sin_cos();
    let m = params.mass;

    let dv = (-f_yf * sdb + f_yr * sb + u.f_xr * cb) / m;
    let dbeta = (f_yf * cdb + f_yr * cb - u.f_xr * sb) / (m * v) - r;
    let dr = (params.a * f_yf * u.delta.cos() - params.b * f_yr) / params.yaw_inertia;
    Ok(StateRate { dv, dbeta, dr })
}

/// World-frame kinematics; the velocity vector points along the course
/// angle `psi + beta`.
pub fn pose_derivative(state: &DriftState, pose: &Pose) -> [f64; 3] {
    let course = pose.psi + state.beta;
    [state.v * course.cos(), state.v * course.sin(), state.r]
}

type Joint = [f64; 6];

fn joint_rate(x: &Joint, u: &ControlInput, params: &VehicleParams) -> Result<Joint> {
    let state = DriftState::new(x[0], x[1], x[2]);
    let pose = Pose {
        x: x[3],
        y: x[4],
        psi: x[5],
    };
    let d = state_derivative(&state, u, params)?;
    let p = pose_derivative(&state, &pose);
    Ok([d.dv, d.dbeta, d.dr, p[0], p[1], p[2]])
}

fn axpy(x: &Joint, h: f64, k: &Joint) -> Joint {
    std::array::from_fn(|i| x[i] + h * k[i])
}

/// One classical RK4 step of the joint six-dimensional state with the
/// controls held over the step.
pub fn step(
    state: &DriftState,
    pose: &Pose,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<(DriftState, Pose)> {
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(Error::InvalidParameter(format!(
            "integrator step must lie in (0, 0.05] s, got {dt}"
        )));
    }
    rk4(state, pose, u, params, dt)
}

/// Advances by `dt` using `substeps` equal RK4 steps.
pub fn step_substeps(
    state: &DriftState,
    pose: &Pose,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
    substeps: usize,
) -> Result<(DriftState, Pose)> {
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be >= 1".into()));
    }
    let h = dt / substeps as f64;
    let (mut s, mut p) = (*state, *pose);
    for _ in 0..substeps {
        (s, p) = step(&s, &p, u, params, h)?;
    }
    Ok((s, p))
}

fn rk4(
    state: &DriftState,
    pose: &Pose,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<(DriftState, Pose)> {
    let x: Joint = [state.v, state.beta, state.r, pose.x, pose.y, pose.psi];
    let k1 = joint_rate(&x, u, params)?;
    let k2 = joint_rate(&axpy(&x, 0.5 * dt, &k1), u, params)?;
    let k3 = joint_rate(&axpy(&x, 0.5 * dt, &k2), u, params)?;
    let k4 = joint_rate(&axpy(&x, dt, &k3), u, params)?;
    let next: Joint =
        std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    Ok((
        DriftState::new(next[0], next[1], next[2]),
        Pose::new(next[3], next[4], next[5]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn nominal() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn loads_symmetric_geometry() {
        let p = VehicleParams {
            mass: 1000.0,
            a: 1.25,
            b: 1.25,
            ..nominal()
        };
        let (f, r) = vertical_loads(&p);
        assert_abs_diff_eq!(f, 4905.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r, 4905.0, epsilon = 1e-9);
    }

    #[test]
    fn loads_split_and_balance() {
        let p = VehicleParams {
            mass: 1500.0,
            a: 1.2,
            b: 1.3,
            ..nominal()
        };
        let (f, r) = vertical_loads(&p);
        assert_abs_diff_eq!(f, 1500.0 * 9.81 * 1.3 / 2.5, epsilon = 1e-9);
        assert_abs_diff_eq!(f, 7651.8, epsilon = 1e-9);
        assert_abs_diff_eq!(f + r, 1500.0 * 9.81, epsilon = 1e-9);
    }

    #[test]
    fn slip_straight_and_pure_steer() {
        let p = nominal();
        let s = DriftState::new(10.0, 0.0, 0.0);
        assert_eq!(slip_angles(&s, 0.0, &p).unwrap(), (0.0, 0.0));
        let (af, ar) = slip_angles(&s, 0.1, &p).unwrap();
        assert_abs_diff_eq!(af, -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(ar, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn slip_degenerate_when_lateral() {
        let p = nominal();
        let s = DriftState::new(10.0, std::f64::consts::FRAC_PI_2, 0.0);
        assert!(matches!(
            slip_angles(&s, 0.0, &p),
            Err(Error::DegenerateState(_))
        ));
    }

    #[test]
    fn tire_force_zero_at_zero_slip_and_bounded() {
        let p = nominal();
        assert_eq!(lateral_tire_force(0.0, 5000.0, &p), 0.0);
        for i in -100..=100 {
            let alpha = i as f64 * 0.015;
            assert!(lateral_tire_force(alpha, 5000.0, &p).abs() <= p.mu * 5000.0);
        }
    }

    #[test]
    fn coasting_straight_has_zero_rates() {
        let p = nominal();
        let d = state_derivative(
            &DriftState::new(15.0, 0.0, 0.0),
            &ControlInput::new(0.0, 0.0),
            &p,
        )
        .unwrap();
        assert_eq!(d.to_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn speed_floor_is_an_error() {
        let p = nominal();
        let r = state_derivative(
            &DriftState::new(0.05, 0.0, 0.0),
            &ControlInput::default(),
            &p,
        );
        assert!(matches!(r, Err(Error::DegenerateState(_))));
    }

    #[test]
    fn pose_rates_along_axes() {
        let s = DriftState::new(10.0, 0.0, 0.3);
        let d = pose_derivative(&s, &Pose::new(0.0, 0.0, 0.0));
        assert_abs_diff_eq!(d[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 0.3, epsilon = 1e-12);
        let d = pose_derivative(&s, &Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn step_rejects_bad_dt() {
        let p = nominal();
        let s = DriftState::new(10.0, 0.0, 0.0);
        let pose = Pose::default();
        let u = ControlInput::default();
        assert!(step(&s, &pose, &u, &p, 0.0).is_err());
        assert!(step(&s, &pose, &u, &p, 0.06).is_err());
        assert!(step(&s, &pose, &u, &p, 0.05).is_ok());
        assert!(step_substeps(&s, &pose, &u, &p, 0.05, 0).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_abs_diff_eq!(wrap_angle(PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.25), -0.25, epsilon = 1e-15);
    }

    #[test]
    fn default_params_validate() {
        nominal().validate().unwrap();
        let bad = VehicleParams {
            tire_c: 2.5,
            ..nominal()
        };
        assert!(bad.validate().is_err());
        let bad = VehicleParams {
            mass: -1.0,
            ..nominal()
        };
        assert!(bad.validate().is_err());
    }
}
