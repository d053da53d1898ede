//! Outer-loop optimizers with SFO accounting and metric traces.
//!
//! Every run is a pure function of `(problem, config, noise, stream)`. Metric
//! oracles grade iterates after the fact and never feed back into the run.

mod bilevel;
mod minimax;
mod theory;

pub use bilevel::{n2sba_outer_gradient, run_n2sba, BilevelNoise};
pub use minimax::{run_baseline, run_n2sgda};
pub use theory::{config_from_guarantee, Guarantee, GuaranteeInputs};

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipsgd::{InnerSchedule, TauSchedule};
use crate::error::{Error, Result};
use crate::noise::{check_tau, RngStream, StreamRng};
use crate::Vector;

/// Iterates with a norm above this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Traces longer than this are thinned to about this many rows by default.
pub const DEFAULT_MAX_ROWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    N2sba,
    N2sgda,
    Sgda,
    Sgdmax,
    ClippedSgdmax,
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::N2sba => "n2sba",
            Algo::N2sgda => "n2sgda",
            Algo::Sgda => "sgda",
            Algo::Sgdmax => "sgdmax",
            Algo::ClippedSgdmax => "clipped_sgdmax",
        }
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, Algo::Sgda | Algo::Sgdmax | Algo::ClippedSgdmax)
    }

    pub fn is_bilevel(&self) -> bool {
        matches!(self, Algo::N2sba)
    }

    /// Single-block stochastic gradient evaluations per outer iteration.
    pub fn cost_per_outer(&self, inner_steps: usize, batch: usize) -> u64 {
        let (k, m) = (inner_steps as u64, batch as u64);
        match self {
            Algo::N2sba => (3 * k).saturating_add(3 * m),
            Algo::N2sgda => k.saturating_add(m),
            Algo::Sgda => 2,
            Algo::Sgdmax | Algo::ClippedSgdmax => k + 1,
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Which iterate a run returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportRule {
    Last,
    /// Uniformly random over `x_1, …, x_T`.
    #[default]
    UniformRandom,
    /// Smallest recorded true gradient norm.
    BestMetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgoConfig {
    pub algo: Algo,
    pub eta_x: f64,
    /// Outer iterations T.
    pub outer_steps: usize,
    /// Inner iterations K (ignored by sgda).
    pub inner_steps: usize,
    /// Outer minibatch size M (nested methods only).
    pub batch: usize,
    /// Penalty λ (n2sba only).
    pub lambda: Option<f64>,
    /// Schedule of the y loop; for sgda only `eta` is used.
    pub inner_y: InnerSchedule,
    /// Schedule of the z loop (n2sba only).
    pub inner_z: Option<InnerSchedule>,
    /// Outer clipping radius (clipped_sgdmax only).
    pub tau_x: Option<f64>,
    pub seed: u64,
    pub report: ReportRule,
    /// Record metrics every `cadence` outer steps; `None` picks the default.
    pub cadence: Option<usize>,
    /// Keep `(t, x_t, y_t, z_t)` every this many outer steps.
    pub snapshot_every: Option<usize>,
}

impl AlgoConfig {
    /// Baseline config with unclipped inner steps; callers adjust fields.
    pub fn new(algo: Algo, eta_x: f64, eta_y: f64, outer_steps: usize, inner_steps: usize) -> Result<Self> {
        let inner = InnerSchedule::manual(eta_y, f64::INFINITY, inner_steps.max(1))?;
        Ok(AlgoConfig {
            algo,
            eta_x,
            outer_steps,
            inner_steps,
            batch: 1,
            lambda: None,
            inner_z: if algo.is_bilevel() { Some(inner.clone()) } else { None },
            inner_y: inner,
            tau_x: None,
            seed: 0,
            report: ReportRule::default(),
            cadence: None,
            snapshot_every: None,
        })
    }

    pub fn cost_per_outer(&self) -> u64 {
        self.algo.cost_per_outer(self.inner_steps, self.batch)
    }

    /// Closed-form SFO count of a complete run.
    pub fn sfo_budget(&self) -> u64 {
        self.cost_per_outer().saturating_mul(self.outer_steps as u64)
    }

    pub fn effective_cadence(&self) -> usize {
        self.cadence
            .unwrap_or_else(|| default_cadence(self.outer_steps))
            .max(1)
    }

    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.algo.name();
        if !(self.eta_x > 0.0 && self.eta_x.is_finite()) {
            return Err(Error::config(format!("{name}: eta_x must be positive and finite, got {}", self.eta_x)));
        }
        if self.outer_steps == 0 {
            return Err(Error::config(format!("{name}: at least one outer step is required")));
        }
        if self.cadence == Some(0) || self.snapshot_every == Some(0) {
            return Err(Error::config(format!("{name}: cadence and snapshot_every must be positive")));
        }
        self.inner_y.validate()?;
        let check_inner = |s: &InnerSchedule, which: &str| {
            if s.steps != self.inner_steps {
                Err(Error::config(format!(
                    "{name}: {which} schedule has {} steps but K = {}",
                    s.steps, self.inner_steps
                )))
            } else {
                Ok(())
            }
        };
        match self.algo {
            Algo::N2sba => {
                match self.lambda {
                    Some(l) if l > 0.0 && l.is_finite() => {}
                    other => return Err(Error::config(format!("{name}: lambda must be positive, got {other:?}"))),
                }
                let z = self
                    .inner_z
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("{name}: the z loop needs a schedule")))?;
                z.validate()?;
                check_inner(z, "z")?;
                check_inner(&self.inner_y, "y")?;
                check_batch(self.batch, name)?;
            }
            Algo::N2sgda => {
                check_inner(&self.inner_y, "y")?;
                check_batch(self.batch, name)?;
            }
            Algo::Sgdmax => check_inner(&self.inner_y, "y")?,
            Algo::ClippedSgdmax => {
                check_inner(&self.inner_y, "y")?;
                let tau = self
                    .tau_x
                    .ok_or_else(|| Error::config(format!("{name}: tau_x is required")))?;
                check_tau(tau)?;
            }
            Algo::Sgda => {}
        }
        Ok(())
    }
}

fn check_batch(batch: usize, name: &str) -> Result<()> {
    if batch == 0 {
        Err(Error::config(format!("{name}: minibatch size must be positive")))
    } else {
        Ok(())
    }
}

/// Every step for T ≤ 10⁴, else about 10⁴ evenly spaced rows.
pub fn default_cadence(outer_steps: usize) -> usize {
    if outer_steps <= DEFAULT_MAX_ROWS {
        1
    } else {
        outer_steps.div_ceil(DEFAULT_MAX_ROWS)
    }
}

/// Which metric oracles to evaluate at recorded rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub grad_norm: bool,
    pub inner_residuals: bool,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics {
            grad_norm: true,
            inner_residuals: true,
        }
    }
}

impl Metrics {
    pub fn none() -> Self {
        Metrics {
            grad_norm: false,
            inner_residuals: false,
        }
    }
}

/// One recorded outer iteration: the state after `t` outer steps.
///
/// Inner residuals are measured at the point the inner loop solved for, i.e.
/// `‖y_{t−1} − y*_λ(x_{t−1})‖` and `‖z_{t−1} − y*(x_{t−1})‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub sfo: u64,
    pub grad_norm_true: Option<f64>,
    pub inner_residual_y: Option<f64>,
    pub inner_residual_z: Option<f64>,
    pub diverged: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    /// Outer iteration during which the failure happened (1-based).
    pub t: usize,
    pub inner_step: Option<usize>,
    pub reason: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.inner_step {
            Some(k) => write!(f, "diverged at outer step {}, inner step {}: {}", self.t, k, self.reason),
            None => write!(f, "diverged at outer step {}: {}", self.t, self.reason),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    pub x: Vector,
    pub y: Vector,
    pub z: Option<Vector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub algo: Algo,
    pub rows: Vec<TraceRow>,
    /// True gradient norm at x_0, when the metric is enabled.
    pub initial_grad_norm: Option<f64>,
    pub x_final: Vector,
    pub y_final: Vector,
    /// Iterate selected by the report rule, and its index.
    pub reported: Vector,
    pub reported_t: usize,
    pub snapshots: Vec<Snapshot>,
    pub divergence: Option<Divergence>,
    /// Outer steps taken with a zero direction.
    pub zero_steps: usize,
    pub sfo_total: u64,
}

impl RunTrace {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Last recorded true gradient norm.
    pub fn final_grad_norm(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.grad_norm_true)
    }

    /// Turns a recorded divergence into a numerical error.
    pub fn check(&self) -> Result<()> {
        match &self.divergence {
            Some(d) => Err(Error::numerical(format!("{}: {d}", self.algo))),
            None => Ok(()),
        }
    }
}

/// Shared bookkeeping of one run.
pub(crate) struct Recorder {
    algo: Algo,
    cost: u64,
    steps: usize,
    cadence: usize,
    snapshot_every: Option<usize>,
    report: ReportRule,
    report_t: usize,
    start: Instant,
    rows: Vec<TraceRow>,
    snapshots: Vec<Snapshot>,
    reported: Option<(usize, Vector)>,
    best: f64,
    pub zero_steps: usize,
}

impl Recorder {
    pub fn new(cfg: &AlgoConfig, report_rng: &mut StreamRng) -> Self {
        let report_t = match cfg.report {
            ReportRule::UniformRandom => report_rng.random_range(1..=cfg.outer_steps),
            _ => cfg.outer_steps,
        };
        Recorder {
            algo: cfg.algo,
            cost: cfg.cost_per_outer(),
            steps: cfg.outer_steps,
            cadence: cfg.effective_cadence(),
            snapshot_every: cfg.snapshot_every,
            report: cfg.report,
            report_t,
            start: Instant::now(),
            rows: Vec::with_capacity(cfg.outer_steps.div_ceil(cfg.effective_cadence()) + 1),
            snapshots: Vec::new(),
            reported: None,
            best: f64::INFINITY,
            zero_steps: 0,
        }
    }

    /// Whether step `t` produces a metric row.
    pub fn records(&self, t: usize) -> bool {
        t.is_multiple_of(self.cadence) || t == self.steps
    }

    pub fn wants_snapshot(&self, t: usize) -> bool {
        self.snapshot_every.is_some_and(|e| t.is_multiple_of(e) || t == self.steps)
    }

    pub fn snapshot(&mut self, t: usize, x: &Vector, y: &Vector, z: Option<&Vector>) {
        self.snapshots.push(Snapshot {
            t,
            x: x.clone(),
            y: y.clone(),
            z: z.cloned(),
        });
    }

    /// Called after step `t` with the new iterate and, on recorded steps, metrics.
    pub fn after_step(&mut self, t: usize, x: &Vector, metrics: Option<(Option<f64>, Option<f64>, Option<f64>)>) {
        if let Some((grad, ry, rz)) = metrics {
            self.rows.push(TraceRow {
                t,
                sfo: self.cost * t as u64,
                grad_norm_true: grad,
                inner_residual_y: ry,
                inner_residual_z: rz,
                diverged: false,
                wall_time_s: self.start.elapsed().as_secs_f64(),
            });
            if self.report == ReportRule::BestMetric {
                if let Some(g) = grad {
                    if g < self.best {
                        self.best = g;
                        self.reported = Some((t, x.clone()));
                    }
                }
            }
        }
        if self.report != ReportRule::BestMetric && t == self.report_t {
            self.reported = Some((t, x.clone()));
        }
    }

    /// Closes the run. `last_good` is the last finite iterate and its index.
    pub fn finish(
        mut self,
        x_final: Vector,
        y_final: Vector,
        last_good: (usize, Vector),
        initial_grad_norm: Option<f64>,
        divergence: Option<Divergence>,
    ) -> RunTrace {
        let steps_done = match &divergence {
            Some(d) => {
                self.rows.push(TraceRow {
                    t: d.t,
                    sfo: self.cost * d.t as u64,
                    grad_norm_true: None,
                    inner_residual_y: None,
                    inner_residual_z: None,
                    diverged: true,
                    wall_time_s: self.start.elapsed().as_secs_f64(),
                });
                d.t
            }
            None => self.steps,
        };
        let (reported_t, reported) = self.reported.take().unwrap_or(last_good);
        RunTrace {
            algo: self.algo,
            rows: self.rows,
            initial_grad_norm,
            x_final,
            y_final,
            reported,
            reported_t,
            snapshots: self.snapshots,
            divergence,
            zero_steps: self.zero_steps,
            sfo_total: self.cost * steps_done as u64,
        }
    }
}

/// Non-finite entries or norm beyond [`DIVERGENCE_NORM`].
pub(crate) fn blown_up(v: &Vector) -> Option<String> {
    if v.iter().any(|c| !c.is_finite()) {
        Some("non-finite iterate".into())
    } else if v.norm() > DIVERGENCE_NORM {
        Some(format!("iterate norm {:.3e} exceeds {DIVERGENCE_NORM:.0e}", v.norm()))
    } else {
        None
    }
}

/// `x − η g/‖g‖`, or `x` unchanged when `g = 0`. Returns whether a step was taken.
pub(crate) fn normalized_step(x: &mut Vector, g: &Vector, eta: f64) -> bool {
    let n = g.norm();
    if n == 0.0 {
        return false;
    }
    x.axpy(-eta / n, g, 1.0);
    true
}

/// Stream roles. Each role owns a generator for the whole run.
pub(crate) mod role {
    pub const Z_LOOP: u64 = 1;
    pub const Y_LOOP: u64 = 2;
    pub const OUTER: u64 = 3;
    pub const REPORT: u64 = 4;
}

/// Schedule copy that never clips.
pub(crate) fn unclipped(s: &InnerSchedule) -> InnerSchedule {
    InnerSchedule {
        taus: TauSchedule::Constant(f64::INFINITY),
        ..s.clone()
    }
}
