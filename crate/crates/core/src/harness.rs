//! Closed-loop episodes on the 8-track, the tracking objective and the
//! episode log format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bayesopt::{bo_minimize, BoConfig, BoState};
use crate::dynamics::{step_substeps, ControlInput, DriftState, Pose, VehicleParams};
use crate::equilibria::{linear_model, mirror, solve_equilibrium, Equilibrium, TurnDirection};
use crate::error::{Error, Result};
use crate::mpc::{MpcConfig, MpcController};
use crate::planner::{
    check_trigger, feedback_steer, project, reference_for_phase, DriftPhase, ThetaParams, Track8,
};

/// Added to the partial objective of a failed episode.
pub const FAILURE_PENALTY: f64 = 3.0;
/// Keeps the logarithm finite for a perfect run.
pub const OBJECTIVE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub vehicle: VehicleParams,
    /// Circle radius of the 8-track [m].
    pub radius: f64,
    /// Equilibrium drift speed [m/s].
    pub v_eq: f64,
    /// Episode length [s].
    pub duration: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    pub mpc: MpcConfig,
    /// Weight on the course error in the objective.
    pub lambda1: f64,
    /// Weight on the sideslip error in the objective.
    pub lambda2: f64,
    /// Lookahead distance of the feedback steering [m].
    pub x_la: f64,
    /// Spin-out when |beta| exceeds this [rad].
    pub beta_max: f64,
    /// Spin-out when V drops below this [m/s].
    pub v_min: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            radius: 44.0,
            v_eq: 19.1,
            duration: 30.0,
            substeps: 1,
            mpc: MpcConfig::default(),
            lambda1: 5.0,
            lambda2: 1.0,
            x_la: 4.0,
            beta_max: 1.5,
            v_min: 2.0,
        }
    }
}

impl EpisodeConfig {
    pub fn dt(&self) -> f64 {
        self.mpc.dt
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.mpc.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.mpc.dt > 0.0 && self.mpc.dt <= 0.05) {
            return bad(format!("mpc.dt must lie in (0, 0.05], got {}", self.mpc.dt));
        }
        let ratio = self.duration / self.dt();
        if !(self.duration > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "episode.duration {} is not a whole number of {} s steps",
                self.duration,
                self.dt()
            ));
        }
        if self.substeps == 0 {
            return bad("episode.substeps must be >= 1".into());
        }
        for (name, v) in [
            ("radius", self.radius),
            ("v_eq", self.v_eq),
            ("beta_max", self.beta_max),
            ("v_min", self.v_min),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("episode.{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("x_la", self.x_la),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("episode.{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn track(&self) -> Result<Track8> {
        Track8::new(self.radius, [0.0, 0.0])
    }

    /// Left- and right-handed equilibria of the configured drift.
    pub fn equilibria(&self) -> Result<(Equilibrium, Equilibrium)> {
        let eq_l = solve_equilibrium(
            &self.vehicle,
            self.v_eq,
            self.radius,
            TurnDirection::LeftHanded,
        )?;
        Ok((eq_l, mirror(&eq_l)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Completed,
    SpinOut,
    SolverFail,
}

impl EpisodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeStatus::Completed => "completed",
            EpisodeStatus::SpinOut => "spinout",
            EpisodeStatus::SolverFail => "solverfail",
        }
    }
}

impl std::str::FromStr for EpisodeStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "completed" => Ok(EpisodeStatus::Completed),
            "spinout" => Ok(EpisodeStatus::SpinOut),
            "solverfail" => Ok(EpisodeStatus::SolverFail),
            other => Err(Error::Parse {
                line: 1,
                message: format!("unknown episode status `{other}`"),
            }),
        }
    }
}

/// State, controls and errors at the start of one control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub v: f64,
    pub beta: f64,
    pub r: f64,
    pub psi: f64,
    pub x: f64,
    pub y: f64,
    pub delta_mpc: f64,
    pub delta_f: f64,
    pub f_xr: f64,
    pub e: f64,
    pub dpsi: f64,
    /// Sideslip of the active reference [rad].
    pub beta_ref: f64,
    pub direction: TurnDirection,
    /// True on the step a reference switch fired.
    pub trigger: bool,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    /// False if the QP hit its iteration limit.
    pub qp_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub dt: f64,
    pub status: EpisodeStatus,
    pub records: Vec<StepRecord>,
    /// Objective accumulated while the episode ran; `None` for logs read
    /// back from disk.
    pub online_j: Option<f64>,
}

impl EpisodeLog {
    pub fn trigger_times(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.trigger)
            .map(|r| r.t)
            .collect()
    }

    pub fn transitions(&self) -> usize {
        self.records.iter().filter(|r| r.trigger).count()
    }

    pub fn max_kkt_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.kkt_residual)
            .fold(0.0, f64::max)
    }
}

/// Per-step term of the tracking objective.
pub fn objective_term(rec: &StepRecord, lambda1: f64, lambda2: f64) -> f64 {
    rec.e.abs() + lambda1 * rec.dpsi.abs() + lambda2 * (rec.beta - rec.beta_ref).abs()
}

/// `log(mean(|e| + l1 |dpsi| + l2 |beta - beta_ref|) + eps)`, plus the
/// failure penalty for truncated episodes.
pub fn objective_j(log: &EpisodeLog, lambda1: f64, lambda2: f64) -> f64 {
    if log.records.is_empty() {
        return OBJECTIVE_EPS.ln() + FAILURE_PENALTY;
    }
    let sum: f64 = log
        .records
        .iter()
        .map(|r| objective_term(r, lambda1, lambda2))
        .sum();
    let j = (sum / log.records.len() as f64 + OBJECTIVE_EPS).ln();
    match log.status {
        EpisodeStatus::Completed => j,
        _ => j + FAILURE_PENALTY,
    }
}

/// Summary statistics of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean_abs_e: f64,
    pub mean_abs_dpsi: f64,
    pub mean_beta_err: f64,
    pub transitions: usize,
    pub j: f64,
    pub status: EpisodeStatus,
    pub steps: usize,
}

pub fn summarize(log: &EpisodeLog, lambda1: f64, lambda2: f64) -> Summary {
    let n = log.records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepRecord) -> f64| log.records.iter().map(f).sum::<f64>() / n;
    Summary {
        mean_abs_e: mean(&|r| r.e.abs()),
        mean_abs_dpsi: mean(&|r| r.dpsi.abs()),
        mean_beta_err: mean(&|r| (r.beta - r.beta_ref).abs()),
        transitions: log.transitions(),
        j: objective_j(log, lambda1, lambda2),
        status: log.status,
        steps: log.records.len(),
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "summary")?;
        writeln!(f, "  status          {}", self.status.as_str())?;
        writeln!(f, "  steps           {}", self.steps)?;
        writeln!(f, "  mean_abs_e      {:.6}", self.mean_abs_e)?;
        writeln!(f, "  mean_abs_dpsi   {:.6}", self.mean_abs_dpsi)?;
        writeln!(f, "  mean_beta_err   {:.6}", self.mean_beta_err)?;
        writeln!(f, "  transitions     {}", self.transitions)?;
        write!(f, "  J               {:.6}", self.j)
    }
}

/// Initial condition of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStart {
    pub state: DriftState,
    pub pose: Pose,
    pub input: ControlInput,
}

/// Runs one scripted episode from the left-handed equilibrium at the top of
/// the left circle.
pub fn run_episode(cfg: &EpisodeConfig, theta: &ThetaParams) -> Result<EpisodeLog> {
    let ctx = EpisodeContext::new(cfg)?;
    Ok(ctx.run(theta, None, DriftPhase::default()))
}

/// Solved equilibria, track and per-direction controllers for one config.
/// Building this once and reusing it across episodes avoids re-solving and
/// re-condensing.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub cfg: EpisodeConfig,
    pub track: Track8,
    pub eq_l: Equilibrium,
    pub eq_r: Equilibrium,
    ctl_l: MpcController,
    ctl_r: MpcController,
}

impl EpisodeContext {
    pub fn new(cfg: &EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        let (eq_l, eq_r) = cfg.equilibria()?;
        let ctl_l = MpcController::new(linear_model(&eq_l, &cfg.vehicle, cfg.dt())?, cfg.mpc.clone())?;
        let ctl_r = MpcController::new(linear_model(&eq_r, &cfg.vehicle, cfg.dt())?, cfg.mpc.clone())?;
        Ok(Self {
            cfg: cfg.clone(),
            track: cfg.track()?,
            eq_l,
            eq_r,
            ctl_l,
            ctl_r,
        })
    }

    pub fn default_start(&self) -> EpisodeStart {
        EpisodeStart {
            state: self.eq_l.state(),
            pose: self.track.start_pose(self.eq_l.beta),
            input: self.eq_l.input(),
        }
    }

    /// Runs with an optional custom start and phase script.
    pub fn run(
        &self,
        theta: &ThetaParams,
        start: Option<EpisodeStart>,
        mut phase: DriftPhase,
    ) -> EpisodeLog {
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let start = start.unwrap_or_else(|| self.default_start());
        let (mut state, mut pose, mut tau) = (start.state, start.pose, start.input);
        let mut records = Vec::with_capacity(cfg.steps());
        let mut status = EpisodeStatus::Completed;
        let mut cost = 0.0;

        for i in 0..cfg.steps() {
            let t = i as f64 * dt;
            let mut proj = match project(&pose, &state, &self.track, phase.direction()) {
                Ok(p) => p,
                Err(_) => {
                    status = EpisodeStatus::SpinOut;
                    break;
                }
            };
            phase.observe(&proj);
            let mut trigger = false;
            if check_trigger(&proj, &phase, theta, &self.track).is_some() {
                phase.advance();
                trigger = true;
                proj = match project(&pose, &state, &self.track, phase.direction()) {
                    Ok(p) => p,
                    Err(_) => {
                        status = EpisodeStatus::SpinOut;
                        break;
                    }
                };
                phase.observe(&proj);
            }
            let direction = phase.direction();
            let xi_ref = reference_for_phase(direction, &self.eq_l, &self.eq_r, theta);
            let ctl = match direction {
                TurnDirection::LeftHanded => &self.ctl_l,
                TurnDirection::RightHanded => &self.ctl_r,
            };
            let out = match ctl.step(&state, &tau, &xi_ref) {
                Ok(o) => o,
                Err(_) => {
                    status = EpisodeStatus::SolverFail;
                    break;
                }
            };
            tau = out.input;
            let delta_f = feedback_steer(tau.delta, &proj, theta, cfg.x_la, cfg.mpc.delta_th);
            records.push(StepRecord {
                t,
                v: state.v,
                beta: state.beta,
                r: state.r,
                psi: pose.psi,
                x: pose.x,
                y: pose.y,
                delta_mpc: tau.delta,
                delta_f,
                f_xr: tau.f_xr,
                e: proj.e,
                dpsi: proj.dpsi,
                beta_ref: xi_ref[1],
                direction,
                trigger,
                kkt_residual: out.kkt_residual,
                qp_iterations: out.qp_iterations,
                qp_converged: out.converged,
            });
            cost += objective_term(&records[records.len() - 1], cfg.lambda1, cfg.lambda2);
            let applied = ControlInput::new(delta_f, tau.f_xr);
            match step_substeps(&state, &pose, &applied, &cfg.vehicle, dt, cfg.substeps) {
                Ok((s, p)) if s.is_finite() => {
                    state = s;
                    pose = p;
                }
                _ => {
                    status = EpisodeStatus::SpinOut;
                    break;
                }
            }
            if state.beta.abs() > cfg.beta_max || state.v < cfg.v_min {
                status = EpisodeStatus::SpinOut;
                break;
            }
        }
        let online_j = if records.is_empty() {
            OBJECTIVE_EPS.ln() + FAILURE_PENALTY
        } else {
            let j = (cost / records.len() as f64 + OBJECTIVE_EPS).ln();
            if status == EpisodeStatus::Completed {
                j
            } else {
                j + FAILURE_PENALTY
            }
        };
        EpisodeLog {
            dt,
            status,
            records,
            online_j: Some(online_j),
        }
    }
}

const LOG_HEADER: &str = "t,V,beta,r,psi,x,y,delta_mpc,delta_f,F_xr,e,dpsi,beta_ref,phase,trigger,kkt_residual,qp_iterations,qp_converged";

/// Formats a float with 9 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..=8).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

/// Writes the log as CSV: a `# status=...,dt=...` line, the header, one row
/// per step.
pub fn write_log<W: Write>(log: &EpisodeLog, mut w: W) -> Result<()> {
    writeln!(w, "# status={},dt={}", log.status.as_str(), fmt_sig(log.dt))?;
    writeln!(w, "{LOG_HEADER}")?;
    let mut line = String::new();
    for r in &log.records {
        line.clear();
        for v in [
            r.t, r.v, r.beta, r.r, r.psi, r.x, r.y, r.delta_mpc, r.delta_f, r.f_xr, r.e, r.dpsi,
            r.beta_ref,
        ] {
            line.push_str(&fmt_sig(v));
            line.push(',');
        }
        let _ = write!(
            line,
            "{},{},{},{},{}",
            if r.direction == TurnDirection::LeftHanded { "L" } else { "R" },
            u8::from(r.trigger),
            fmt_sig(r.kkt_residual),
            r.qp_iterations,
            u8::from(r.qp_converged)
        );
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(reader: R) -> Result<EpisodeLog> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let (_, meta) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty log".into()))?;
    let meta = meta?;
    let meta = meta
        .strip_prefix("# ")
        .ok_or_else(|| parse_err(1, "missing `# status=...` line".into()))?;
    let mut status = None;
    let mut dt = None;
    for kv in meta.split(',') {
        match kv.split_once('=') {
            Some(("status", v)) => status = Some(v.parse::<EpisodeStatus>()?),
            Some(("dt", v)) => {
                dt = Some(v.parse::<f64>().map_err(|e| parse_err(1, format!("dt: {e}")))?)
            }
            _ => return Err(parse_err(1, format!("unexpected metadata `{kv}`"))),
        }
    }
    let status = status.ok_or_else(|| parse_err(1, "missing status".into()))?;
    let dt = dt.ok_or_else(|| parse_err(1, "missing dt".into()))?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing header".into()))?;
    if header?.trim() != LOG_HEADER {
        return Err(parse_err(2, "unexpected column header".into()));
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 18 {
            return Err(parse_err(
                lineno,
                format!("expected 18 fields, found {}", f.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("column {}: {e}", i + 1)))
        };
        let direction = match f[13] {
            "L" => TurnDirection::LeftHanded,
            "R" => TurnDirection::RightHanded,
            other => return Err(parse_err(lineno, format!("bad phase `{other}`"))),
        };
        let flag = |i: usize| -> Result<bool> {
            match f[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(lineno, format!("bad flag `{other}`"))),
            }
        };
        records.push(StepRecord {
            t: num(0)?,
            v: num(1)?,
            beta: num(2)?,
            r: num(3)?,
            psi: num(4)?,
            x: num(5)?,
            y: num(6)?,
            delta_mpc: num(7)?,
            delta_f: num(8)?,
            f_xr: num(9)?,
            e: num(10)?,
            dpsi: num(11)?,
            beta_ref: num(12)?,
            direction,
            trigger: flag(14)?,
            kkt_residual: num(15)?,
            qp_iterations: f[16]
                .parse()
                .map_err(|e| parse_err(lineno, format!("column 17: {e}")))?,
            qp_converged: flag(17)?,
        });
    }
    Ok(EpisodeLog {
        dt,
        status,
        records,
        online_j: None,
    })
}

/// Tunes theta by Bayesian optimization over full episodes, minimizing J.
pub fn tune(cfg: &EpisodeConfig, bo: &BoConfig, seed: u64) -> Result<BoState> {
    let ctx = EpisodeContext::new(cfg)?;
    bo_minimize(
        |x| {
            let theta = ThetaParams::new(x[0], x[1], x[2], x[3]);
            let log = ctx.run(&theta, None, DriftPhase::default());
            objective_j(&log, cfg.lambda1, cfg.lambda2)
        },
        &ThetaParams::bounds(),
        bo,
        seed,
    )
}

const TRACE_HEADER: &str = "iteration,kind,c_lr,c_rl,dv_i,k,J,incumbent_J";

/// Writes the tuning history as CSV. Floats use the shortest exact
/// representation so the trace can be reloaded bit for bit.
pub fn write_trace<W: Write>(state: &BoState, mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for ev in &state.history {
        let kind = if ev.is_seed { "seed" } else { "bo" };
        write!(w, "{},{kind}", ev.iteration)?;
        for v in ev.x.iter().chain([&ev.value, &ev.incumbent]) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Best theta of a tuning run.
pub fn best_theta(state: &BoState) -> Result<ThetaParams> {
    ThetaParams::from_slice(&state.best_x)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn rec(e: f64, dpsi: f64, beta_err: f64) -> StepRecord {
        StepRecord {
            t: 0.0,
            v: 19.1,
            beta: -0.4 + beta_err,
            r: 0.434,
            psi: 0.0,
            x: 0.0,
            y: 0.0,
            delta_mpc: 0.0,
            delta_f: 0.0,
            f_xr: 0.0,
            e,
            dpsi,
            beta_ref: -0.4,
            direction: TurnDirection::LeftHanded,
            trigger: false,
            kkt_residual: 0.0,
            qp_iterations: 0,
            qp_converged: true,
        }
    }

    fn log_of(r: StepRecord, status: EpisodeStatus) -> EpisodeLog {
        EpisodeLog {
            dt: 0.05,
            status,
            records: vec![r; 10],
            online_j: None,
        }
    }

    #[test]
    fn objective_floor_and_unit() {
        let j = objective_j(&log_of(rec(0.0, 0.0, 0.0), EpisodeStatus::Completed), 5.0, 1.0);
        assert!((j - 1e-9f64.ln()).abs() < 1e-12);
        assert!((j + 20.723).abs() < 1e-3);
        let j = objective_j(&log_of(rec(1.0, 0.0, 0.0), EpisodeStatus::Completed), 5.0, 1.0);
        assert!(j.abs() < 1e-8);
    }

    #[test]
    fn objective_weighted_mix() {
        let j = objective_j(&log_of(rec(0.1, 0.02, 0.05), EpisodeStatus::Completed), 5.0, 1.0);
        assert!((j - (0.25f64 + 1e-9).ln()).abs() < 1e-12);
        assert!((j + 1.386).abs() < 1e-3);
    }

    #[test]
    fn failure_adds_penalty() {
        let ok = objective_j(&log_of(rec(0.1, 0.0, 0.0), EpisodeStatus::Completed), 5.0, 1.0);
        let bad = objective_j(&log_of(rec(0.1, 0.0, 0.0), EpisodeStatus::SpinOut), 5.0, 1.0);
        assert!((bad - ok - FAILURE_PENALTY).abs() < 1e-12);
    }

    #[test]
    fn sig_format() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(19.1), "19.1");
        assert_eq!(fmt_sig(-0.123456789123), "-0.123456789");
        assert_eq!(fmt_sig(4324.123456789), "4324.12346");
        assert_eq!(fmt_sig(1.5e-12), "1.50000000e-12");
        for x in [1.0 / 3.0, -2.0 / 7.0, 12345.678901234, 3.3e-7] {
            let y: f64 = fmt_sig(x).parse().unwrap();
            assert!(((x - y) / x).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_round_trip() {
        let log = log_of(rec(0.1, 0.02, 0.05), EpisodeStatus::SpinOut);
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let back = read_log(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.status, EpisodeStatus::SpinOut);
        assert_eq!(back.records.len(), 10);
        assert_eq!(back.records[3].e, 0.1);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let text = format!("# status=completed,dt=0.05\n{LOG_HEADER}\n1,2,3\n");
        match read_log(std::io::Cursor::new(text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
