//! Clipped stochastic gradient inner solver for strongly convex (or, with
//! [`Sign::Max`], strongly concave) subproblems.
//!
//! One step is `y ← y ∓ η · clip(g_k, τ_k)` with one oracle call per step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::{check_tau, clip_in_place, RngStream};
use crate::Vector;

/// Which guarantee a theory schedule targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerMode {
    InExpectation,
    /// Holds with probability at least `1 − delta`.
    HighProbability { delta: f64 },
}

impl InnerMode {
    /// Logarithmic inflation `ln(4(K+1)/δ)`, or 1 in expectation.
    pub fn log_factor(&self, k: usize) -> f64 {
        match *self {
            InnerMode::InExpectation => 1.0,
            InnerMode::HighProbability { delta } => (4.0 * (k as f64 + 1.0) / delta).ln(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            InnerMode::HighProbability { delta } if !(delta > 0.0 && delta < 1.0) => {
                Err(Error::config(format!("confidence delta must be in (0, 1), got {delta}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleOrigin {
    Theory,
    Manual,
}

/// Clipping radii τ_0, …, τ_{K−1}.
///
/// `ExpDecay` stores `τ_k = scale · exp(−rate · k)` so long schedules need no
/// allocation.
#[derive(Clone, Debug, PartialEq)]
pub enum TauSchedule {
    Constant(f64),
    ExpDecay { scale: f64, rate: f64 },
    Explicit(Vec<f64>),
}

impl TauSchedule {
    /// `τ_k = exp(−η μ (first + step·k)) · R / (120 η · divisor)`.
    pub fn decaying(eta: f64, mu: f64, r_hat: f64, first: f64, step: f64, divisor: f64) -> Self {
        TauSchedule::ExpDecay {
            scale: (-eta * mu * first).exp() * r_hat / (120.0 * eta * divisor),
            rate: eta * mu * step,
        }
    }

    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        match self {
            TauSchedule::Constant(t) => *t,
            TauSchedule::ExpDecay { scale, rate } => scale * (-rate * k as f64).exp(),
            TauSchedule::Explicit(v) => v[k],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerSchedule {
    pub eta: f64,
    /// Number of inner steps K.
    pub steps: usize,
    pub taus: TauSchedule,
    pub mode: InnerMode,
    pub origin: ScheduleOrigin,
}

impl InnerSchedule {
    /// Constant stepsize and radius. `tau = f64::INFINITY` disables clipping.
    pub fn manual(eta: f64, tau: f64, steps: usize) -> Result<Self> {
        let s = InnerSchedule {
            eta,
            steps,
            taus: TauSchedule::Constant(tau),
            mode: InnerMode::InExpectation,
            origin: ScheduleOrigin::Manual,
        };
        s.validate()?;
        Ok(s)
    }

    #[inline]
    pub fn tau(&self, k: usize) -> f64 {
        self.taus.at(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("inner stepsize must be positive and finite, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::config("inner loop needs at least one step"));
        }
        self.mode.validate()?;
        match &self.taus {
            TauSchedule::Constant(t) => check_tau(*t),
            TauSchedule::ExpDecay { scale, rate } => {
                check_tau(*scale)?;
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::config(format!("tau decay rate must be finite and nonnegative, got {rate}")));
                }
                // the last radius may underflow for absurd inputs
                check_tau(self.tau(self.steps - 1))
            }
            TauSchedule::Explicit(v) => {
                if v.len() != self.steps {
                    return Err(Error::config(format!(
                        "{} clipping radii given for {} inner steps",
                        v.len(),
                        self.steps
                    )));
                }
                v.iter().try_for_each(|t| check_tau(*t))
            }
        }
    }
}

/// Fixed point of `B = max{2, c / (ln B)²}`.
///
/// For `c ≤ 2(ln 2)²` the answer is 2. Otherwise `u = ln B` is the root of
/// `u + 2 ln u = ln c`, found by relaxed fixed-point steps with a bisection
/// fallback.
pub fn solve_bk(c: f64) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::config(format!("B_K needs a positive finite argument, got {c}")));
    }
    let ln2 = std::f64::consts::LN_2;
    if c <= 2.0 * ln2 * ln2 {
        return Ok(2.0);
    }
    let target = c.ln();
    let h = |u: f64| u + 2.0 * u.ln() - target;
    let mut u = target.max(1.0);
    for _ in 0..200 {
        // relaxation by 1/(1 + 2/u) makes the map locally contractive
        let next = u - h(u) / (1.0 + 2.0 / u);
        if !(next > ln2 * 0.5) || !next.is_finite() {
            break;
        }
        if (next - u).abs() <= 1e-15 * next.max(1.0) {
            return Ok(next.exp().max(2.0));
        }
        u = next;
    }
    // h is increasing on (0, ∞) with h(ln 2) < 0
    let (mut lo, mut hi) = (ln2, target.max(1.0) + 1.0);
    while h(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            return Ok((0.5 * (lo + hi)).exp());
        }
    }
    Err(Error::numerical(format!("B_K fixed point did not converge for c = {c}")))
}

/// Argument passed to [`solve_bk`] by the inner-solver schedule.
pub fn bk_argument(mu: f64, sigma: f64, p: f64, steps: usize, r_hat: f64, mode: InnerMode) -> f64 {
    let e = 2.0 * (p - 1.0) / p;
    let log = mode.log_factor(steps);
    mu * mu * (steps as f64).powf(e) * r_hat * r_hat / (5400f64.powf(2.0 / p) * sigma * sigma * log.powf(e))
}

/// Theory schedule of the clipped SGD inner solver.
///
/// `η = min{1/(400 ℓ L), ln B_K/(μ(K+1))}` and
/// `τ_k = exp(−η μ (1 + k/2)) R̂/(120 η L)` where `L` is 1 in expectation and
/// `ln(4(K+1)/δ)` for high probability.
pub fn theory_schedule(
    mu: f64,
    ell: f64,
    sigma: f64,
    p: f64,
    steps: usize,
    r_hat: f64,
    mode: InnerMode,
) -> Result<InnerSchedule> {
    for (name, v) in [("mu", mu), ("ell", ell), ("sigma", sigma), ("R_hat", r_hat)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::config(format!("moment order p must be in (1, 2], got {p}")));
    }
    if steps == 0 {
        return Err(Error::config("inner loop needs at least one step"));
    }
    mode.validate()?;
    let log = mode.log_factor(steps);
    let b = solve_bk(bk_argument(mu, sigma, p, steps, r_hat, mode))?;
    let eta = (1.0 / (400.0 * ell * log)).min(b.ln() / (mu * (steps as f64 + 1.0)));
    let s = InnerSchedule {
        eta,
        steps,
        taus: TauSchedule::decaying(eta, mu, r_hat, 1.0, 0.5, log),
        mode,
        origin: ScheduleOrigin::Theory,
    };
    s.validate()?;
    Ok(s)
}

/// Right-hand side of the in-expectation guarantee
/// `E‖y_K − y*‖² ≤ 2R̂² max{exp(−K/(400κ)), 5400^{2/p} σ² (ln B_K)² / (μ² K^{2(p−1)/p} R̂²)}`.
pub fn in_expectation_bound(mu: f64, ell: f64, sigma: f64, p: f64, steps: usize, r_hat: f64) -> Result<f64> {
    let b = solve_bk(bk_argument(mu, sigma, p, steps, r_hat, InnerMode::InExpectation))?;
    let k = steps as f64;
    let kappa = ell / mu;
    let noise_term = 5400f64.powf(2.0 / p) * sigma * sigma * b.ln().powi(2)
        / (mu * mu * k.powf(2.0 * (p - 1.0) / p) * r_hat * r_hat);
    Ok(2.0 * r_hat * r_hat * (-k / (400.0 * kappa)).exp().max(noise_term))
}

/// Descent for minimization, ascent for maximization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerResult {
    pub y_final: Vector,
    /// ‖y_K − target‖² when a target was supplied.
    pub residual_sq: Option<f64>,
    pub sfo_used: u64,
}

/// Runs K clipped steps from `y0` with a fresh generator for `stream`.
pub fn clipped_sgd<O>(
    oracle: O,
    y0: &Vector,
    schedule: &InnerSchedule,
    sign: Sign,
    stream: &RngStream,
    target: Option<&Vector>,
) -> Result<InnerResult>
where
    O: FnMut(&Vector, &mut crate::noise::StreamRng) -> Vector,
{
    let mut rng = stream.generator();
    clipped_sgd_with(oracle, y0, schedule, sign, &mut rng, target, |_, _| {})
}

/// As [`clipped_sgd`] with a caller-owned generator and an observer called
/// as `observe(k + 1, &y_{k+1})` after every step.
pub fn clipped_sgd_with<R, O, F>(
    mut oracle: O,
    y0: &Vector,
    schedule: &InnerSchedule,
    sign: Sign,
    rng: &mut R,
    target: Option<&Vector>,
    mut observe: F,
) -> Result<InnerResult>
where
    R: Rng + ?Sized,
    O: FnMut(&Vector, &mut R) -> Vector,
    F: FnMut(usize, &Vector),
{
    schedule.validate()?;
    if let Some(t) = target {
        if t.len() != y0.len() {
            return Err(Error::config(format!("target has length {}, iterate {}", t.len(), y0.len())));
        }
    }
    let mut y = y0.clone();
    for k in 0..schedule.steps {
        let mut g = oracle(&y, rng);
        if g.len() != y.len() {
            return Err(Error::config(format!("oracle returned length {}, expected {}", g.len(), y.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite oracle output at inner step {k}")));
        }
        clip_in_place(&mut g, schedule.tau(k));
        g *= schedule.eta;
        match sign {
            Sign::Min => y -= &g,
            Sign::Max => y += &g,
        }
        observe(k + 1, &y);
    }
    let residual_sq = target.map(|t| (&y - t).norm_squared());
    Ok(InnerResult {
        y_final: y,
        residual_sq,
        sfo_used: schedule.steps as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn bk_lower_branch_and_boundary() {
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(solve_bk(2.0 * ln2 * ln2).unwrap(), 2.0);
        assert_eq!(solve_bk(0.5).unwrap(), 2.0);
        assert!(solve_bk(0.0).is_err());
    }

    #[test]
    fn bk_solves_the_implicit_equation() {
        for c in [1.0, 3.0, 1e3, 1e6, 1e12] {
            let b = solve_bk(c).unwrap();
            let rhs = 2f64.max(c / b.ln().powi(2));
            assert!((b - rhs).abs() <= 1e-9 * b, "c = {c}: B = {b}, rhs = {rhs}");
        }
    }

    #[test]
    fn isotropic_quadratic_one_step() {
        let target = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let mu = 2.5;
        let sched = InnerSchedule::manual(1.0 / mu, 1e9, 1).unwrap();
        let t = target.clone();
        let res = clipped_sgd(
            move |y: &Vector, _: &mut _| (y - &t) * mu,
            &DVector::zeros(3),
            &sched,
            Sign::Min,
            &RngStream::new(0, 0),
            Some(&target),
        )
        .unwrap();
        assert!(res.residual_sq.unwrap() < 1e-28);
        assert_eq!(res.sfo_used, 1);
    }

    #[test]
    fn non_finite_oracle_reports_step() {
        let sched = InnerSchedule::manual(0.1, 1.0, 5).unwrap();
        let mut calls = 0;
        let err = clipped_sgd(
            |y: &Vector, _: &mut _| {
                calls += 1;
                if calls == 3 {
                    y.map(|_| f64::NAN)
                } else {
                    y.clone()
                }
            },
            &DVector::zeros(2),
            &sched,
            Sign::Min,
            &RngStream::new(0, 0),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("inner step 2"));
    }

    #[test]
    fn explicit_schedule_length_is_checked() {
        let s = InnerSchedule {
            eta: 0.1,
            steps: 3,
            taus: TauSchedule::Explicit(vec![1.0, 1.0]),
            mode: InnerMode::InExpectation,
            origin: ScheduleOrigin::Manual,
        };
        assert!(s.validate().is_err());
        assert!(InnerSchedule::manual(0.1, 0.0, 3).is_err());
        assert!(InnerSchedule::manual(0.1, f64::INFINITY, 3).is_ok());
    }
}
