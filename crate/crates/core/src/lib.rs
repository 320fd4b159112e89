//! Flight control for single-axis tiltrotor quadrotors.
//!
//! The crate bundles a 6-DOF plant model, a pseudo-inverse control allocator,
//! a nonlinear model predictive controller whose virtual control is constrained
//! to the actuator-feasible set, LQR and sliding-mode baselines, and a
//! closed-loop episode runner with CSV/JSON outputs.
//!
//! Frames follow NED: gravity points along `+z` and altitude gain is negative `z`.

pub mod allocator;
pub mod baseline;
pub mod config;
mod error;
pub mod linalg;
pub mod nmpc;
pub mod output;
pub mod sim;
pub mod vehicle;

pub use error::{Error, Result};

/// Software version embedded in run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
