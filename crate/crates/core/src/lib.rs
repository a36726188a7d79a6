//! Drift planning and control: vehicle model, drift equilibria, linear MPC,
//! 8-track planner, Bayesian optimization and the episode harness.

pub mod bayesopt;
pub mod config;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod harness;
pub mod mpc;
pub mod planner;
pub mod qp;

pub use error::{Error, Result};
