//! Covariance steering for linear stochastic systems with hybrid transitions.
//!
//! The crate steers the state covariance of a linear stochastic system from a
//! prescribed initial value to a prescribed terminal one across mode switches
//! (guard-triggered resets), around a nominal mean trajectory:
//!
//! * [`hybrid_model`] — hybrid system definitions, event detection, and
//!   saltation matrices (the first-order model of a reset).
//! * [`smooth_steering`] — the closed-form single-segment solver: Hamiltonian
//!   kernels, the coupled Riccati pair, and covariance propagation.
//! * [`hybrid_analytic`] — the closed-form solver across invertible jumps via
//!   kernel composition.
//! * [`sdp_steering`] — the convex log-det program for general (rectangular
//!   or singular) jumps, plus controller recovery.
//! * [`nominal_ilqr`] — event-aware iLQR producing the nominal trajectory,
//!   the linearizations, and the saltation matrices the solvers consume.
//! * [`sim_harness`] — Monte-Carlo validation of the closed loop.
//! * [`cli`] — the `hcs` command-line front end and its artifact formats.
//!
//! The narrative guide lives in `book/`; its code listings are compiled and
//! run as doc-tests through the [`guide`] module.

pub mod cli;
pub mod error;
pub mod guide;
pub mod hybrid_analytic;
pub mod hybrid_model;
pub mod linalg;
pub mod nominal_ilqr;
pub mod presets;
pub mod sdp_steering;
pub mod sim_harness;
pub mod smooth_steering;
pub mod verify;

pub use error::{Error, Result};
