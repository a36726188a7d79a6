//! Linear MPC drift controller in condensed form.
//!
//! Decision variables are the stacked input increments
//! `[d_delta_1, d_F_1, ..., d_delta_Nc, d_F_Nc]` (force in kN). Predictions
//! use the per-phase [`LinearModel`] in deviation coordinates around its
//! origin equilibrium; the tracked reference may differ from that origin
//! (speed residual).

use nalgebra::{DMatrix, DVector, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, DriftState};
use crate::equilibria::{LinearModel, Matrix5, Vector5, FORCE_SCALE};
use crate::error::{Error, Result};
use crate::qp::{self, QpFactor, QpOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon [steps].
    pub np: usize,
    /// Control horizon [steps].
    pub nc: usize,
    /// Diagonal state weights on `[V, beta, r, delta, F_xr(kN)]`.
    pub q: [f64; 5],
    /// Diagonal increment weights on `[d_delta, d_F_xr(kN)]`.
    pub r_w: [f64; 2],
    /// Steering bound [rad].
    pub delta_th: f64,
    /// Force bounds [N].
    pub f_min: f64,
    pub f_max: f64,
    /// Steering increment bound [rad/step].
    pub ddelta_th: f64,
    /// Force increment bound [N/step].
    pub df_th: f64,
    /// Sample time [s].
    pub dt: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            np: 20,
            nc: 20,
            q: [0.88, 17.5, 19.8, 0.75, 1e-7],
            r_w: [7.7, 6.4e-7],
            delta_th: 0.6,
            f_min: -3000.0,
            f_max: 8000.0,
            ddelta_th: 0.12,
            df_th: 250.0,
            dt: 0.05,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.nc == 0 || self.np == 0 || self.nc > self.np {
            return bad(format!(
                "mpc.nc must satisfy 1 <= nc <= np, got nc = {}, np = {}",
                self.nc, self.np
            ));
        }
        if self.q.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("mpc.q entries must be >= 0, got {:?}", self.q));
        }
        if self.r_w.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad(format!("mpc.r_w entries must be > 0, got {:?}", self.r_w));
        }
        if !(self.delta_th > 0.0 && self.f_min < self.f_max) {
            return bad("mpc.f_min: input bounds define an empty set".into());
        }
        if !(self.ddelta_th > 0.0 && self.df_th > 0.0) {
            return bad("mpc.ddelta_th: increment bounds must be > 0".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("mpc.dt must be > 0, got {}", self.dt));
        }
        Ok(())
    }

    /// Whether `u` lies in the admissible input set.
    pub fn admissible(&self, u: &ControlInput) -> bool {
        u.delta.abs() <= self.delta_th + 1e-9
            && u.f_xr >= self.f_min - 1e-6
            && u.f_xr <= self.f_max + 1e-6
    }
}

/// Condensed QP: `min 1/2 x'Hx + g'x` with increment boxes
/// `lower <= x <= upper` and absolute-input bounds
/// `tau_lower <= accumulation x <= tau_upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub accumulation: DMatrix<f64>,
    pub tau_lower: DVector<f64>,
    pub tau_upper: DVector<f64>,
}

impl QpProblem {
    /// One-sided form `C x >= b` for [`qp::solve`].
    pub fn inequality_form(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.h.nrows();
        let stacked = stack_rows(&DMatrix::identity(n, n), &self.accumulation);
        let lo = stack_vec(&self.lower, &self.tau_lower);
        let hi = stack_vec(&self.upper, &self.tau_upper);
        qp::two_sided(&stacked, &lo, &hi)
    }

    /// Objective value up to the constant term.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Horizon matrices that depend only on the model and the weights.
#[derive(Debug, Clone)]
struct Condensed {
    h: DMatrix<f64>,
    /// `Gamma' Qbar Phi`, maps the initial deviation to the gradient.
    g_x0: DMatrix<f64>,
    /// `Gamma' Qbar (1 x I)`, maps a constant reference offset to the gradient.
    g_ref: DMatrix<f64>,
    accumulation: DMatrix<f64>,
}

fn condense(model: &LinearModel, cfg: &MpcConfig) -> Condensed {
    let (np, nc) = (cfg.np, cfg.nc);
    let a = model.a_d;
    let b = model.increment_matrix();
    let n = 2 * nc;

    let mut powers = Vec::with_capacity(np + 1);
    powers.push(Matrix5::identity());
    for k in 0..np {
        powers.push(a * powers[k]);
    }

    let mut phi = DMatrix::zeros(5 * np, 5);
    let mut gamma = DMatrix::zeros(5 * np, n);
    for k in 0..np {
        phi.fixed_view_mut::<5, 5>(5 * k, 0).copy_from(&powers[k + 1]);
        for j in 0..=k.min(nc - 1) {
            let blk = powers[k - j] * b;
            gamma.fixed_view_mut::<5, 2>(5 * k, 2 * j).copy_from(&blk);
        }
    }
    let qdiag = DVector::from_fn(5 * np, |i, _| cfg.q[i % 5]);
    let qg = DMatrix::from_fn(5 * np, n, |i, j| qdiag[i] * gamma[(i, j)]);
    let mut h = gamma.transpose() * &qg;
    for i in 0..n {
        h[(i, i)] += cfg.r_w[i % 2];
    }
    h = (&h + h.transpose()) * 0.5;
    let g_x0 = qg.transpose() * &phi;
    let stack = DMatrix::from_fn(5 * np, 5, |i, j| if i % 5 == j { 1.0 } else { 0.0 });
    let g_ref = qg.transpose() * stack;
    let accumulation = DMatrix::from_fn(n, n, |i, j| {
        if j <= i && i % 2 == j % 2 {
            1.0
        } else {
            0.0
        }
    });
    Condensed {
        h: h * 2.0,
        g_x0: g_x0 * 2.0,
        g_ref: g_ref * 2.0,
        accumulation,
    }
}

fn augmented(state: &DriftState, tau: &ControlInput) -> Vector5 {
    Vector5::new(
        state.v,
        state.beta,
        state.r,
        tau.delta,
        tau.f_xr / FORCE_SCALE,
    )
}

fn check_config(model: &LinearModel, cfg: &MpcConfig) -> Result<()> {
    cfg.validate()?;
    if (model.dt - cfg.dt).abs() > 1e-12 {
        return Err(Error::DimensionMismatch(format!(
            "model sample time {} differs from controller sample time {}",
            model.dt, cfg.dt
        )));
    }
    Ok(())
}

fn bounds(cfg: &MpcConfig, tau_prev: &ControlInput) -> [DVector<f64>; 4] {
    let n = 2 * cfg.nc;
    let inc = [cfg.ddelta_th, cfg.df_th / FORCE_SCALE];
    let lo_abs = [-cfg.delta_th, cfg.f_min / FORCE_SCALE];
    let hi_abs = [cfg.delta_th, cfg.f_max / FORCE_SCALE];
    let prev = [tau_prev.delta, tau_prev.f_xr / FORCE_SCALE];
    [
        DVector::from_fn(n, |i, _| -inc[i % 2]),
        DVector::from_fn(n, |i, _| inc[i % 2]),
        DVector::from_fn(n, |i, _| lo_abs[i % 2] - prev[i % 2]),
        DVector::from_fn(n, |i, _| hi_abs[i % 2] - prev[i % 2]),
    ]
}

/// Builds the condensed QP whose objective is
/// `sum_k |xi_k - xi_ref|^2_Q + sum_k |d_k|^2_R` (scaled by 1/2 in the
/// usual QP convention, so `H` and `g` carry a factor 2).
pub fn build_qp(
    model: &LinearModel,
    xi_0: &Vector5,
    xi_ref: &Vector5,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    check_config(model, cfg)?;
    if xi_0.iter().chain(xi_ref.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateState("non-finite MPC state".into()));
    }
    let c = condense(model, cfg);
    let origin = model.origin.augmented();
    let g = gradient(&c, &(xi_0 - origin), &(xi_ref - origin));
    let tau_prev = ControlInput::new(xi_0[3], xi_0[4] * FORCE_SCALE);
    let [lower, upper, tau_lower, tau_upper] = bounds(cfg, &tau_prev);
    Ok(QpProblem {
        h: c.h,
        g,
        lower,
        upper,
        accumulation: c.accumulation,
        tau_lower,
        tau_upper,
    })
}

fn gradient(c: &Condensed, dev0: &Vector5, ref_off: &Vector5) -> DVector<f64> {
    let d0 = DVector::from_column_slice(dev0.as_slice());
    let dr = DVector::from_column_slice(ref_off.as_slice());
    &c.g_x0 * d0 - &c.g_ref * dr
}

/// Result of one controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput {
    pub input: ControlInput,
    pub increment: Vector2<f64>,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    /// False if the QP hit its iteration limit and the fallback was used.
    pub converged: bool,
    /// Number of active constraints at the solution.
    pub active_constraints: usize,
}

/// Controller bound to one linear model; condensation and the QP
/// factorization are computed once at construction.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    model: LinearModel,
    condensed: Condensed,
    factor: QpFactor,
    opts: QpOptions,
}

impl MpcController {
    pub fn new(model: LinearModel, cfg: MpcConfig) -> Result<Self> {
        check_config(&model, &cfg)?;
        let condensed = condense(&model, &cfg);
        let n = 2 * cfg.nc;
        let stacked = stack_rows(&DMatrix::identity(n, n), &condensed.accumulation);
        let c = stack_rows(&stacked, &(-&stacked));
        let factor = QpFactor::new(condensed.h.clone(), c)?;
        Ok(Self {
            cfg,
            model,
            condensed,
            factor,
            opts: QpOptions::default(),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    /// Computes `tau = tau_prev + d_1` for the reference `xi_ref`.
    pub fn step(
        &self,
        state: &DriftState,
        tau_prev: &ControlInput,
        xi_ref: &Vector5,
    ) -> Result<MpcOutput> {
        let xi0 = augmented(state, tau_prev);
        if !xi0.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateState("non-finite MPC state".into()));
        }
        let origin = self.model.origin.augmented();
        let g = gradient(&self.condensed, &(xi0 - origin), &(xi_ref - origin));
        let [lower, upper, tau_lower, tau_upper] = bounds(&self.cfg, tau_prev);
        let b = stack_vec(
            &stack_vec(&lower, &tau_lower),
            &-stack_vec(&upper, &tau_upper),
        );
        let sol = qp::solve_partial(&self.factor, &g, &b, &self.opts)?;
        let d = if sol.converged {
            Vector2::new(sol.x[0], sol.x[1])
        } else {
            // Fall back to the first move of the unconstrained-in-time
            // iterate clipped into the increment and input sets.
            self.clip_first(&sol.x, tau_prev)
        };
        let input = ControlInput::new(tau_prev.delta + d[0], tau_prev.f_xr + d[1] * FORCE_SCALE);
        Ok(MpcOutput {
            input,
            increment: d,
            kkt_residual: sol.kkt_residual,
            qp_iterations: sol.iterations,
            converged: sol.converged,
            active_constraints: sol.active.len(),
        })
    }

    fn clip_first(&self, x: &DVector<f64>, tau_prev: &ControlInput) -> Vector2<f64> {
        let c = &self.cfg;
        let dd = x[0]
            .clamp(-c.ddelta_th, c.ddelta_th)
            .clamp(-c.delta_th - tau_prev.delta, c.delta_th - tau_prev.delta);
        let df = x[1]
            .clamp(-c.df_th / FORCE_SCALE, c.df_th / FORCE_SCALE)
            .clamp(
                (c.f_min - tau_prev.f_xr) / FORCE_SCALE,
                (c.f_max - tau_prev.f_xr) / FORCE_SCALE,
            );
        Vector2::new(dd, df)
    }
}

/// Stateless single step: builds the controller for `model` and applies it.
pub fn mpc_step(
    state: &DriftState,
    tau_prev: &ControlInput,
    xi_ref: &Vector5,
    model: &LinearModel,
    cfg: &MpcConfig,
) -> Result<MpcOutput> {
    MpcController::new(model.clone(), cfg.clone())?.step(state, tau_prev, xi_ref)
}

/// Deviation rollout of the linear model for a stacked increment sequence;
/// used by tests and diagnostics.
pub fn rollout(model: &LinearModel, dev0: &Vector5, increments: &[SVector<f64, 2>]) -> Vec<Vector5> {
    let mut out = Vec::with_capacity(increments.len());
    let mut x = *dev0;
    for d in increments {
        x = model.predict(&x, d);
        out.push(x);
    }
    out
}
