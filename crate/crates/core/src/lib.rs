//! Hybrid SCADA+PMU power-system state estimation and PMU placement driven
//! by the convergence-observability-performance (COP) metric
//! `rho = beta / phi`.
//!
//! Module map:
//!
//! - [`grid`]: case parsing, admittance matrix, per-bus and per-line
//!   constant matrices.
//! - [`measurement`]: power-flow equations, Jacobian, masks and synthetic
//!   measurements.
//! - [`gain`]: gain-matrix components, the Lipschitz matrix `M` and the COP
//!   metric.
//! - [`estimator`]: Gauss-Newton hybrid estimator with PMU initialization.
//! - [`linalg`]: dense symmetric eigen/Cholesky kernel.
//! - [`sdp`]: log-det barrier solver for small LMI programs.
//! - [`placement`]: Charnes-Cooper SDP relaxation, randomized rounding,
//!   exhaustive search and baselines.
//! - [`experiments`]: seeded sweeps and Monte-Carlo convergence studies.

pub mod cases;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod gain;
pub mod grid;
pub mod linalg;
pub mod measurement;
pub mod placement;
pub mod plot;
pub mod rng;
pub mod sdp;

pub use error::{Error, Result};
