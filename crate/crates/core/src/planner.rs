//! 8-shaped track, path errors, the scripted drift phase machine and the
//! lookahead feedback steering.
//!
//! The track is two tangent circles of equal radius touching at `P_0`. The
//! left circle sits north of `P_0` and is driven counter-clockwise, the right
//! circle sits south and is driven clockwise.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, DriftState, Pose};
use crate::equilibria::{Equilibrium, TurnDirection, Vector5};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track8 {
    pub radius: f64,
    pub center_l: [f64; 2],
    pub center_r: [f64; 2],
    pub p0: [f64; 2],
}

impl Track8 {
    /// Track with `P_0` at `p0` and the circles stacked north/south of it.
    pub fn new(radius: f64, p0: [f64; 2]) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "track radius must be > 0, got {radius}"
            )));
        }
        Ok(Self {
            radius,
            center_l: [p0[0], p0[1] + radius],
            center_r: [p0[0], p0[1] - radius],
            p0,
        })
    }

    pub fn center(&self, direction: TurnDirection) -> [f64; 2] {
        match direction {
            TurnDirection::LeftHanded => self.center_l,
            TurnDirection::RightHanded => self.center_r,
        }
    }

    /// Start pose: the point of the left circle opposite `P_0`, course
    /// tangent to the circle (heading west), for a vehicle drifting with
    /// sideslip `beta`.
    pub fn start_pose(&self, beta: f64) -> Pose {
        let c = self.center_l;
        Pose::new(c[0], c[1] + self.radius, PI - beta)
    }

    pub fn circumference(&self) -> f64 {
        TAU * self.radius
    }
}

impl Default for Track8 {
    fn default() -> Self {
        Self::new(44.0, [0.0, 0.0]).expect("positive radius")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackProjection {
    /// Signed radial error, positive outside the active circle [m].
    pub e: f64,
    /// Course error against the path tangent in travel direction [rad].
    pub dpsi: f64,
    /// Arc length to `P_0` in travel direction, in `[0, 2 pi R)` [m].
    pub s_to_p0: f64,
    pub closest_point: [f64; 2],
    /// Polar angle of the position around the active center [rad].
    pub angle: f64,
    pub direction: TurnDirection,
}

pub fn project(
    pose: &Pose,
    state: &DriftState,
    track: &Track8,
    direction: TurnDirection,
) -> Result<TrackProjection> {
    let c = track.center(direction);
    let (dx, dy) = (pose.x - c[0], pose.y - c[1]);
    let rho = dx.hypot(dy);
    if rho < 1e-9 {
        return Err(Error::AtCenter);
    }
    let sigma = direction.sign();
    let angle = dy.atan2(dx);
    let tangent = angle + sigma * FRAC_PI_2;
    let dpsi = wrap_angle(pose.psi + state.beta - tangent);
    let angle_p0 = (track.p0[1] - c[1]).atan2(track.p0[0] - c[0]);
    let mut arc = ((angle_p0 - angle) * sigma).rem_euclid(TAU) * track.radius;
    if arc >= track.circumference() {
        arc = 0.0;
    }
    Ok(TrackProjection {
        e: rho - track.radius,
        dpsi,
        s_to_p0: arc,
        closest_point: [
            c[0] + track.radius * dx / rho,
            c[1] + track.radius * dy / rho,
        ],
        angle,
        direction,
    })
}

/// Learned framework parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThetaParams {
    /// Normalized arc threshold for the left-to-right switch.
    pub c_lr: f64,
    /// Normalized arc threshold for the right-to-left switch.
    pub c_rl: f64,
    /// Speed residual added to the equilibrium speed [m/s].
    pub dv_i: f64,
    /// Feedback steering gain [rad/m].
    pub k: f64,
}

impl ThetaParams {
    pub const LOWER: [f64; 4] = [0.0, 0.0, -2.0, 0.0];
    pub const UPPER: [f64; 4] = [0.1, 0.1, 2.0, 1.0];

    pub fn new(c_lr: f64, c_rl: f64, dv_i: f64, k: f64) -> Self {
        Self { c_lr, c_rl, dv_i, k }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.c_lr, self.c_rl, self.dv_i, self.k]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, d] => Ok(Self::new(*a, *b, *c, *d)),
            _ => Err(Error::DimensionMismatch(format!(
                "theta needs 4 entries, got {}",
                v.len()
            ))),
        }
    }

    pub fn bounds() -> Vec<(f64, f64)> {
        Self::LOWER.iter().copied().zip(Self::UPPER).collect()
    }

    pub fn within_bounds(&self) -> bool {
        self.to_array()
            .iter()
            .zip(Self::LOWER.iter().zip(Self::UPPER.iter()))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }
}

impl Default for ThetaParams {
    fn default() -> Self {
        Self::new(0.0273, 0.0215, 0.12, 0.21)
    }
}

/// One leg of the episode script: drift direction and the rotation it must
/// complete before its exit trigger may fire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptLeg {
    pub direction: TurnDirection,
    pub sweep: f64,
}

/// Half lap left, full lap right, half lap left.
pub const EIGHT_SCRIPT: [ScriptLeg; 3] = [
    ScriptLeg {
        direction: TurnDirection::LeftHanded,
        sweep: PI,
    },
    ScriptLeg {
        direction: TurnDirection::RightHanded,
        sweep: TAU,
    },
    ScriptLeg {
        direction: TurnDirection::LeftHanded,
        sweep: PI,
    },
];

/// Rotation a leg may still be short of when its trigger fires; keeps the
/// start of a leg (which sits near `P_0` after a switch) from re-triggering.
pub const PROGRESS_SLACK: f64 = FRAC_PI_2;

/// Current sustained-drift phase plus the script cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPhase {
    pub leg: usize,
    /// Unwrapped rotation around the active center since the leg began [rad].
    pub progress: f64,
    last_angle: Option<f64>,
    script: Vec<ScriptLeg>,
}

impl Default for DriftPhase {
    fn default() -> Self {
        Self::new(EIGHT_SCRIPT.to_vec())
    }
}

/// A reference switch between sustained drifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub from: TurnDirection,
    pub to: TurnDirection,
    /// Index of the leg that starts.
    pub leg: usize,
}

impl DriftPhase {
    pub fn new(script: Vec<ScriptLeg>) -> Self {
        assert!(!script.is_empty(), "script needs at least one leg");
        Self {
            leg: 0,
            progress: 0.0,
            last_angle: None,
            script,
        }
    }

    /// A single endless leg: sustained drift with no transitions.
    pub fn sustained(direction: TurnDirection) -> Self {
        Self::new(vec![ScriptLeg {
            direction,
            sweep: f64::INFINITY,
        }])
    }

    pub fn direction(&self) -> TurnDirection {
        self.script[self.leg].direction
    }

    pub fn is_last_leg(&self) -> bool {
        self.leg + 1 >= self.script.len()
    }

    pub fn current_leg(&self) -> ScriptLeg {
        self.script[self.leg]
    }

    /// Accumulates rotation in travel direction from a fresh projection.
    pub fn observe(&mut self, proj: &TrackProjection) {
        if let Some(last) = self.last_angle {
            self.progress += wrap_angle(proj.angle - last) * proj.direction.sign();
        }
        self.last_angle = Some(proj.angle);
    }

    /// Moves to the next leg and clears the progress counter.
    pub fn advance(&mut self) -> Option<Transition> {
        if self.is_last_leg() {
            return None;
        }
        let from = self.direction();
        self.leg += 1;
        self.progress = 0.0;
        self.last_angle = None;
        Some(Transition {
            from,
            to: self.direction(),
            leg: self.leg,
        })
    }
}

/// Normalized arc threshold that applies when leaving `direction`.
pub fn trigger_threshold(direction: TurnDirection, theta: &ThetaParams) -> f64 {
    match direction {
        TurnDirection::LeftHanded => theta.c_lr,
        TurnDirection::RightHanded => theta.c_rl,
    }
}

/// Returns the transition that should fire now, without mutating `phase`.
pub fn check_trigger(
    proj: &TrackProjection,
    phase: &DriftPhase,
    theta: &ThetaParams,
    track: &Track8,
) -> Option<Transition> {
    if phase.is_last_leg() || proj.direction != phase.direction() {
        return None;
    }
    let leg = phase.current_leg();
    if phase.progress < leg.sweep - PROGRESS_SLACK {
        return None;
    }
    let c = trigger_threshold(phase.direction(), theta);
    // A leg that reaches P_0 without meeting its threshold switches there.
    if proj.s_to_p0 / track.circumference() <= c || phase.progress >= leg.sweep {
        Some(Transition {
            from: leg.direction,
            to: phase.script[phase.leg + 1].direction,
            leg: phase.leg + 1,
        })
    } else {
        None
    }
}

/// Augmented reference of the phase, with the speed residual applied.
pub fn reference_for_phase(
    direction: TurnDirection,
    eq_l: &Equilibrium,
    eq_r: &Equilibrium,
    theta: &ThetaParams,
) -> Vector5 {
    let eq = match direction {
        TurnDirection::LeftHanded => eq_l,
        TurnDirection::RightHanded => eq_r,
    };
    let mut xi = eq.augmented();
    xi[0] += theta.dv_i;
    xi
}

/// Lateral error projected `x_la` ahead along the course. `dpsi` turning
/// away from the center grows `e`, which is the negative angle sense on the
/// counter-clockwise circle and the positive one on the clockwise circle.
pub fn lookahead_error(proj: &TrackProjection, x_la: f64) -> f64 {
    proj.e - proj.direction.sign() * x_la * proj.dpsi.sin()
}

/// Adds the proportional lookahead correction to the MPC steering. The
/// correction steers toward the active center when the vehicle is (or is
/// about to be) outside the circle.
pub fn feedback_steer(
    delta_mpc: f64,
    proj: &TrackProjection,
    theta: &ThetaParams,
    x_la: f64,
    delta_th: f64,
) -> f64 {
    let correction = proj.direction.sign() * theta.k * lookahead_error(proj, x_la);
    (delta_mpc + correction).clamp(-delta_th, delta_th)
}
