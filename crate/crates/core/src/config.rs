//! Run configuration file.
//!
//! A sectioned TOML file. Every key is optional and falls back to the
//! built-in default; unknown keys are rejected.
//!
//! ```toml
//! seed = 7                # BO seed (u64)
//!
//! [vehicle]
//! mass = 1500.0           # kg
//! yaw_inertia = 2500.0    # kg m^2
//! a = 1.2                 # CoG to front axle, m
//! b = 1.3                 # CoG to rear axle, m
//! mu = 0.85               # friction coefficient, -
//! tire_b = 10.0           # Pacejka B, -
//! tire_c = 1.48           # Pacejka C, in (1, 2]
//! gravity = 9.81          # m/s^2
//!
//! [episode]
//! radius = 44.0           # circle radius of the 8-track, m
//! v_eq = 19.1             # equilibrium drift speed, m/s
//! duration = 30.0         # s, a whole number of mpc.dt steps
//! substeps = 1            # RK4 substeps per control period
//! lambda1 = 5.0           # objective weight on |dpsi|, m/rad
//! lambda2 = 1.0           # objective weight on |beta - beta_ref|, m/rad
//! x_la = 4.0              # feedback lookahead, m
//! beta_max = 1.5          # spin-out sideslip, rad
//! v_min = 2.0             # spin-out speed, m/s
//!
//! [mpc]
//! np = 20                 # prediction horizon, steps
//! nc = 20                 # control horizon, steps
//! q = [0.88, 17.5, 19.8, 0.75, 1e-7]   # weights on V, beta, r, delta, F_xr (kN)
//! r_w = [7.7, 6.4e-7]     # weights on d_delta (rad), d_F_xr (kN)
//! delta_th = 0.6          # rad
//! f_min = -3000.0         # N
//! f_max = 8000.0          # N
//! ddelta_th = 0.12        # rad per step
//! df_th = 250.0           # N per step
//! dt = 0.05               # s
//!
//! [theta]
//! c_lr = 0.0273           # normalized arc threshold, left to right
//! c_rl = 0.0215           # normalized arc threshold, right to left
//! dv_i = 0.12             # speed residual, m/s
//! k = 0.21                # feedback gain, rad/m
//!
//! [bo]
//! n_seeds = 20
//! n_iters = 50
//! active_limit = 400
//! refit_every = 0         # 0 keeps the kernel fixed
//!
//! [bo.kernel]
//! lengthscales = [0.2]    # per normalized input, one entry broadcasts
//! signal_std = 1.0        # standardized units
//! noise_std = 0.05        # standardized units
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayesopt::BoConfig;
use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::harness::EpisodeConfig;
use crate::mpc::MpcConfig;
use crate::planner::ThetaParams;

pub const DEFAULT_SEED: u64 = 7;

/// `[episode]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub radius: f64,
    pub v_eq: f64,
    pub duration: f64,
    pub substeps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub x_la: f64,
    pub beta_max: f64,
    pub v_min: f64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let d = EpisodeConfig::default();
        Self {
            radius: d.radius,
            v_eq: d.v_eq,
            duration: d.duration,
            substeps: d.substeps,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            x_la: d.x_la,
            beta_max: d.beta_max,
            v_min: d.v_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub vehicle: VehicleParams,
    pub episode: EpisodeSection,
    pub mpc: MpcConfig,
    pub theta: ThetaParams,
    pub bo: BoConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            vehicle: VehicleParams::default(),
            episode: EpisodeSection::default(),
            mpc: MpcConfig::default(),
            theta: ThetaParams::default(),
            bo: BoConfig::default(),
        }
    }
}

impl Config {
    /// Parses and validates `text`. Errors carry the offending field and,
    /// when it can be found, its line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = line_of(text, span.start);
                    match key_at(text, line) {
                        Some(key) if !msg.contains('`') => {
                            Error::Config(format!("line {line}: {key}: {msg}"))
                        }
                        _ => Error::Config(format!("line {line}: {msg}")),
                    }
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.validate().map_err(|e| {
            let msg = match e {
                Error::InvalidParameter(m) | Error::DimensionMismatch(m) => m,
                other => other.to_string(),
            };
            match locate(text, &msg) {
                Some(line) => Error::Config(format!("line {line}: {msg}")),
                None => Error::Config(msg),
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.episode().validate()?;
        self.bo.validate()?;
        let names = ["c_lr", "c_rl", "dv_i", "k"];
        let values = self.theta.to_array();
        for i in 0..4 {
            let (lo, hi) = (ThetaParams::LOWER[i], ThetaParams::UPPER[i]);
            if !(values[i] >= lo && values[i] <= hi) {
                return Err(Error::InvalidParameter(format!(
                    "theta.{} must lie in [{lo}, {hi}], got {}",
                    names[i], values[i]
                )));
            }
        }
        Ok(())
    }

    pub fn episode(&self) -> EpisodeConfig {
        let e = &self.episode;
        EpisodeConfig {
            vehicle: self.vehicle,
            radius: e.radius,
            v_eq: e.v_eq,
            duration: e.duration,
            substeps: e.substeps,
            mpc: self.mpc.clone(),
            lambda1: e.lambda1,
            lambda2: e.lambda2,
            x_la: e.x_la,
            beta_max: e.beta_max,
            v_min: e.v_min,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Dotted path of the key assigned on 1-based `line`.
fn key_at(text: &str, line: usize) -> Option<String> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = l.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
        }
        if i + 1 == line {
            let (k, _) = l.split_once('=')?;
            let k = k.trim();
            return Some(if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            });
        }
    }
    None
}

/// Line of the key named by a message of the form `section.key ...`, or of
/// its section header when the key is absent from the file.
fn locate(text: &str, msg: &str) -> Option<usize> {
    let path: String = msg
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '.')
        .collect();
    let (section, key) = path.rsplit_once('.')?;
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}
