//! Clipped and normalized stochastic methods for nonconvex bilevel and
//! minimax optimization under heavy-tailed gradient noise.
//!
//! - [`noise`]: zero-mean heavy-tailed perturbations, seeded streams, `clip`.
//! - [`problems`]: test problems with exact, noisy and analytic oracles.
//! - [`clipsgd`]: the clipped SGD inner solver and its schedules.
//! - [`algorithms`]: N²SBA, N²SGDA and the SGDA/SGDmax baselines.
//! - [`harness`]: TOML experiment specs, seeded multi-run execution, CSV output.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod algorithms;
pub mod clipsgd;
pub mod error;
pub mod harness;
pub mod noise;
pub mod problems;
pub mod selftest;

pub use error::{Error, Result};

/// Dense column vector used for every iterate and gradient.
pub type Vector = nalgebra::DVector<f64>;
