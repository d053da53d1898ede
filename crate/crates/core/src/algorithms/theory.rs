//! Parameter schedules from the convergence guarantees.
//!
//! Order expressions are evaluated with every hidden constant set to 1 and
//! counts rounded up. Logarithmic factors are evaluated at their stated
//! arguments.

use serde::{Deserialize, Serialize};

use super::{Algo, AlgoConfig, ReportRule};
use crate::clipsgd::{solve_bk, InnerMode, InnerSchedule, ScheduleOrigin, TauSchedule};
use crate::error::{Error, Result};
use crate::problems::{BilevelConstants, MinimaxConstants};

/// Largest loop count a guarantee schedule may produce.
const MAX_COUNT: f64 = 1e18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guarantee {
    /// Bilevel, in expectation.
    BilevelInExpectation,
    /// Bilevel, high probability.
    BilevelHighProbability,
    /// Minimax, in expectation.
    MinimaxInExpectation,
    /// Minimax, high probability.
    MinimaxHighProbability,
}

impl Guarantee {
    pub fn algo(&self) -> Algo {
        match self {
            Guarantee::BilevelInExpectation | Guarantee::BilevelHighProbability => Algo::N2sba,
            Guarantee::MinimaxInExpectation | Guarantee::MinimaxHighProbability => Algo::N2sgda,
        }
    }

    pub fn high_probability(&self) -> bool {
        matches!(self, Guarantee::BilevelHighProbability | Guarantee::MinimaxHighProbability)
    }
}

/// Everything the schedules depend on. Unset fields are reported by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeInputs {
    pub ell: Option<f64>,
    pub mu: Option<f64>,
    /// Upper-level (or minimax) noise level.
    pub sigma_f: Option<f64>,
    /// Lower-level noise level (bilevel only).
    pub sigma_g: Option<f64>,
    pub p: Option<f64>,
    pub epsilon: Option<f64>,
    /// Failure probability (high-probability guarantees only).
    pub delta: Option<f64>,
    /// Initial suboptimality of the upper objective.
    pub gap: Option<f64>,
    /// Bound on the initial inner distance ‖ŷ_0 − y*(x_0)‖.
    pub r0: Option<f64>,
    /// Smoothness of f and g (bilevel); default to ℓ.
    pub l_f: Option<f64>,
    pub l_g: Option<f64>,
    /// Inner distance bounds; derived from `r0` when unset.
    pub r_y: Option<f64>,
    pub r_z: Option<f64>,
}

impl GuaranteeInputs {
    pub fn from_bilevel(c: &BilevelConstants) -> Self {
        GuaranteeInputs {
            ell: c.ell(),
            mu: c.mu,
            l_f: c.l_f,
            l_g: c.l_g,
            ..Default::default()
        }
    }

    pub fn from_minimax(c: &MinimaxConstants) -> Self {
        GuaranteeInputs {
            ell: c.ell,
            mu: c.mu,
            ..Default::default()
        }
    }
}

struct Required {
    ell: f64,
    mu: f64,
    sigma_f: f64,
    p: f64,
    epsilon: f64,
    gap: f64,
    r0: f64,
}

fn require(inp: &GuaranteeInputs, which: Guarantee) -> Result<(Required, Option<f64>, Option<f64>)> {
    let mut missing = Vec::new();
    let mut take = |name: &'static str, v: Option<f64>| match v {
        Some(x) if x > 0.0 && x.is_finite() => x,
        _ => {
            missing.push(name);
            f64::NAN
        }
    };
    let req = Required {
        ell: take("ell", inp.ell),
        mu: take("mu", inp.mu),
        sigma_f: take("sigma_f", inp.sigma_f),
        p: take("p", inp.p),
        epsilon: take("epsilon", inp.epsilon),
        gap: take("gap", inp.gap),
        r0: take("r0", inp.r0),
    };
    let sigma_g = if which.algo() == Algo::N2sba {
        Some(take("sigma_g", inp.sigma_g))
    } else {
        None
    };
    let delta = if which.high_probability() {
        Some(take("delta", inp.delta))
    } else {
        None
    };
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "{which:?} needs positive values for: {}",
            missing.join(", ")
        )));
    }
    if !(req.p > 1.0 && req.p <= 2.0) {
        return Err(Error::config(format!("moment order p must be in (1, 2], got {}", req.p)));
    }
    if let Some(d) = delta {
        if d >= 1.0 {
            return Err(Error::config(format!("delta must be in (0, 1), got {d}")));
        }
    }
    Ok((req, sigma_g, delta))
}

fn count(name: &str, v: f64) -> Result<usize> {
    let c = v.ceil();
    if !(c.is_finite() && c <= MAX_COUNT) {
        return Err(Error::config(format!("{name} = {v:.3e} is too large to run")));
    }
    Ok((c as usize).max(1))
}

/// Builds the run configuration prescribed by `which`.
pub fn config_from_guarantee(inp: &GuaranteeInputs, which: Guarantee) -> Result<AlgoConfig> {
    let (r, sigma_g, delta) = require(inp, which)?;
    let kappa = r.ell / r.mu;
    let q = r.p / (r.p - 1.0);
    let e = 2.0 * (r.p - 1.0) / r.p;
    let c5400 = 5400f64.powf(2.0 / r.p);
    let mode = match delta {
        Some(d) => InnerMode::HighProbability { delta: d },
        None => InnerMode::InExpectation,
    };
    let eps = r.epsilon;

    let mut cfg = match which {
        Guarantee::BilevelInExpectation | Guarantee::BilevelHighProbability => {
            let sigma_g = sigma_g.expect("required for bilevel");
            let sigma = r.sigma_f.max(sigma_g);
            let l_f = inp.l_f.unwrap_or(r.ell);
            let l_g = inp.l_g.unwrap_or(r.ell);
            let lambda = (kappa / r.r0)
                .max(r.ell * kappa.powi(2) / r.gap)
                .max(r.ell * kappa.powi(3) / eps);
            let t = count("T", r.gap * r.ell * kappa.powi(3) / eps.powi(2))?;
            let m = count(
                "M",
                r.ell.powf(q) * kappa.powf(3.0 * q) * sigma.powf(q) / eps.powf(2.0 * q),
            )?;
            let k = count(
                "K",
                r.ell.powf(q) * kappa.powf(4.0 * q) * sigma.powf(q) / eps.powf(2.0 * q),
            )?;
            let small = 2.0 * eps.powi(4) / (r.ell.powi(4) * kappa.powi(6));
            let r_y = inp.r_y.unwrap_or_else(|| {
                (4.0 * r.r0 * r.r0 + small + 32.0 * eps * eps / (r.ell * r.ell * kappa.powi(4))).sqrt()
            });
            let r_z = inp
                .r_z
                .unwrap_or_else(|| (r.r0 * r.r0 + small + 2.0 * eps * eps / (r.ell * r.ell * kappa.powi(4))).sqrt());
            let log = match delta {
                Some(d) => (16.0 * t as f64 * k as f64 / d).ln(),
                None => 1.0,
            };
            let kf = k as f64;
            let lm = lambda * r.mu;
            let b_y = solve_bk(
                lm * lm * kf.powf(e) * r_y * r_y
                    / (c5400 * (r.sigma_f + lambda * sigma_g).powi(2) * log.powf(e)),
            )?;
            let b_z = solve_bk(r.mu * r.mu * kf.powf(e) * r_z * r_z / (c5400 * sigma_g * sigma_g * log.powf(e)))?;
            let eta_y = (1.0 / (400.0 * (l_f + lambda * l_g) * log)).min(2.0 * b_y.ln() / (lm * kf));
            let eta_z = (1.0 / (400.0 * lambda * l_g * log)).min(b_z.ln() / (lm * kf));
            let (taus_z, taus_y, eta_x) = if which == Guarantee::BilevelInExpectation {
                (
                    TauSchedule::decaying(eta_z, lm, r_z, 0.5, 0.25, 1.0),
                    TauSchedule::decaying(eta_y, lm, r_y, 1.0, 0.5, 1.0),
                    eps / (r.ell * kappa.powi(3)),
                )
            } else {
                (
                    TauSchedule::decaying(eta_z, lm, r_z, 1.0, 0.5, log),
                    TauSchedule::decaying(eta_y, lm, r_y, 0.5, 0.25, log),
                    (r.gap / (r.ell * kappa.powi(3) * t as f64)).sqrt(),
                )
            };
            let mut cfg = AlgoConfig::new(Algo::N2sba, eta_x, eta_y, t, k)?;
            cfg.batch = m;
            cfg.lambda = Some(lambda);
            cfg.inner_y = theory_inner(eta_y, k, taus_y, mode);
            cfg.inner_z = Some(theory_inner(eta_z, k, taus_z, mode));
            cfg
        }
        Guarantee::MinimaxInExpectation | Guarantee::MinimaxHighProbability => {
            let sigma = r.sigma_f;
            let t = count("T", r.gap * kappa * r.ell / eps.powi(2))?;
            let m = count("M", (sigma / eps).powf(q))?;
            let k = count(
                "K",
                kappa + (r.ell * r.ell * sigma * sigma / (r.mu * r.mu * eps * eps)).powf(q / 2.0),
            )?;
            let r_y = inp.r_y.unwrap_or(r.r0 + 4.0 * eps / r.ell);
            let log = match delta {
                Some(d) => (8.0 * t as f64 * k as f64 / d).ln(),
                None => 1.0,
            };
            let kf = k as f64;
            let b = solve_bk(r.mu * r.mu * kf.powf(e) * r_y * r_y / (c5400 * sigma * sigma * log.powf(e)))?;
            let eta_y = (1.0 / (400.0 * r.ell * log)).min(b.ln() / (r.mu * kf));
            let eta_x = if which == Guarantee::MinimaxInExpectation {
                eps / (kappa * r.ell)
            } else {
                (r.gap / ((kappa + 1.0) * r.ell * t as f64)).sqrt()
            };
            let mut cfg = AlgoConfig::new(Algo::N2sgda, eta_x, eta_y, t, k)?;
            cfg.batch = m;
            cfg.inner_y = theory_inner(eta_y, k, TauSchedule::decaying(eta_y, r.mu, r_y, 1.0, 0.5, log), mode);
            cfg
        }
    };
    cfg.report = ReportRule::UniformRandom;
    cfg.validate()?;
    Ok(cfg)
}

fn theory_inner(eta: f64, steps: usize, taus: TauSchedule, mode: InnerMode) -> InnerSchedule {
    InnerSchedule {
        eta,
        steps,
        taus,
        mode,
        origin: ScheduleOrigin::Theory,
    }
}
