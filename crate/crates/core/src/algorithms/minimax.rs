use super::{blown_up, normalized_step, role, unclipped, AlgoConfig, Algo, Divergence, Metrics, Recorder, RunTrace};
use crate::clipsgd::{clipped_sgd_with, Sign};
use crate::error::{Error, Result};
use crate::noise::{clip_in_place, NoiseModel, RngStream};
use crate::problems::{maximizer, phi_and_grad, MinimaxProblem};
use crate::Vector;

fn check_start<P: MinimaxProblem>(prob: &P, x0: &Vector, y0: &Vector) -> Result<()> {
    if x0.len() != prob.dim_x() || y0.len() != prob.dim_y() {
        return Err(Error::config(format!(
            "initial point has dimensions ({}, {}), problem expects ({}, {})",
            x0.len(),
            y0.len(),
            prob.dim_x(),
            prob.dim_y()
        )));
    }
    Ok(())
}

struct Grader<'a, P> {
    prob: &'a P,
    metrics: Metrics,
}

impl<P: MinimaxProblem> Grader<'_, P> {
    fn grad_norm(&self, x: &Vector) -> Option<f64> {
        if self.metrics.grad_norm {
            phi_and_grad(self.prob, x).ok().map(|(_, g)| g.norm())
        } else {
            None
        }
    }

    fn residual(&self, x: &Vector, y: &Vector) -> Option<f64> {
        if self.metrics.inner_residuals {
            maximizer(self.prob, x).ok().map(|s| (y - s).norm())
        } else {
            None
        }
    }
}

fn inner_failure(t: usize, k: usize, err: Error) -> Result<Divergence> {
    match err {
        Error::Numerical(reason) => Ok(Divergence {
            t,
            inner_step: Some(k),
            reason,
        }),
        other => Err(other),
    }
}

/// Nested-loop normalized stochastic gradient descent ascent.
///
/// K clipped ascent steps on `f(x_t, ·)` warm-started across outer
/// iterations, then a normalized descent step along the mean of M noisy
/// `∇_x f(x_t, y_t)` samples.
pub fn run_n2sgda<P: MinimaxProblem>(
    prob: &P,
    cfg: &AlgoConfig,
    noise: &NoiseModel,
    metrics: Metrics,
    x0: &Vector,
    y0: &Vector,
    stream: &RngStream,
) -> Result<RunTrace> {
    if cfg.algo != Algo::N2sgda {
        return Err(Error::config(format!("run_n2sgda called with algo {}", cfg.algo)));
    }
    cfg.validate()?;
    check_start(prob, x0, y0)?;
    let grader = Grader { prob, metrics };
    let mut y_rng = stream.derive(role::Y_LOOP).generator();
    let mut outer_rng = stream.derive(role::OUTER).generator();
    let mut rec = Recorder::new(cfg, &mut stream.derive(role::REPORT).generator());
    let initial = grader.grad_norm(x0);

    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut last_good = (0usize, x.clone());
    let mut divergence = None;
    if cfg.snapshot_every.is_some() {
        rec.snapshot(0, &x, &y, None);
    }

    for t in 1..=cfg.outer_steps {
        let mut k_done = 0;
        let res = clipped_sgd_with(
            |yy: &Vector, rng: &mut _| prob.noisy_grad_y(noise, &x, yy, rng),
            &y,
            &cfg.inner_y,
            Sign::Max,
            &mut y_rng,
            None,
            |k, _| k_done = k,
        );
        match res {
            Ok(r) => y = r.y_final,
            Err(e) => {
                divergence = Some(inner_failure(t, k_done, e)?);
                break;
            }
        }
        if let Some(reason) = blown_up(&y) {
            divergence = Some(Divergence {
                t,
                inner_step: Some(cfg.inner_steps),
                reason,
            });
            break;
        }
        let recording = rec.records(t);
        let res_y = if recording { grader.residual(&x, &y) } else { None };

        let mut g = Vector::zeros(x.len());
        for _ in 0..cfg.batch {
            g += prob.noisy_grad_x(noise, &x, &y, &mut outer_rng);
        }
        g /= cfg.batch as f64;
        if !normalized_step(&mut x, &g, cfg.eta_x) {
            rec.zero_steps += 1;
        }
        if let Some(reason) = blown_up(&x) {
            divergence = Some(Divergence {
                t,
                inner_step: None,
                reason,
            });
            break;
        }
        last_good = (t, x.clone());
        let row = recording.then(|| (grader.grad_norm(&x), res_y, None));
        rec.after_step(t, &x, row);
        if rec.wants_snapshot(t) {
            rec.snapshot(t, &x, &y, None);
        }
    }
    Ok(rec.finish(x.clone(), y, last_good, initial, divergence))
}

/// SGDA, SGDmax and clipped SGDmax.
///
/// - sgda: simultaneous single-sample steps `x ← x − η_x ĝ_x`, `y ← y + η_y ĝ_y`
///   with both samples taken at the current `(x, y)`.
/// - sgdmax: K unclipped ascent steps on y, then one plain descent step on x.
/// - clipped_sgdmax: as sgdmax with the inner schedule's radii and `tau_x`.
///
/// Divergence is an expected outcome here and only recorded in the trace.
pub fn run_baseline<P: MinimaxProblem>(
    prob: &P,
    cfg: &AlgoConfig,
    noise: &NoiseModel,
    metrics: Metrics,
    x0: &Vector,
    y0: &Vector,
    stream: &RngStream,
) -> Result<RunTrace> {
    if !cfg.algo.is_baseline() {
        return Err(Error::config(format!("run_baseline called with algo {}", cfg.algo)));
    }
    cfg.validate()?;
    check_start(prob, x0, y0)?;
    let grader = Grader { prob, metrics };
    let mut y_rng = stream.derive(role::Y_LOOP).generator();
    let mut outer_rng = stream.derive(role::OUTER).generator();
    let mut rec = Recorder::new(cfg, &mut stream.derive(role::REPORT).generator());
    let initial = grader.grad_norm(x0);

    let (inner, tau_x) = match cfg.algo {
        Algo::ClippedSgdmax => (cfg.inner_y.clone(), cfg.tau_x.expect("validated")),
        _ => (unclipped(&cfg.inner_y), f64::INFINITY),
    };

    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut last_good = (0usize, x.clone());
    let mut divergence = None;
    if cfg.snapshot_every.is_some() {
        rec.snapshot(0, &x, &y, None);
    }

    for t in 1..=cfg.outer_steps {
        let recording = rec.records(t);
        let mut res_y = None;
        if cfg.algo == Algo::Sgda {
            if recording {
                res_y = grader.residual(&x, &y);
            }
            let gx = prob.noisy_grad_x(noise, &x, &y, &mut outer_rng);
            let gy = prob.noisy_grad_y(noise, &x, &y, &mut outer_rng);
            x.axpy(-cfg.eta_x, &gx, 1.0);
            y.axpy(cfg.inner_y.eta, &gy, 1.0);
            if let Some(reason) = blown_up(&y) {
                divergence = Some(Divergence {
                    t,
                    inner_step: None,
                    reason,
                });
                break;
            }
        } else {
            let mut k_done = 0;
            let res = clipped_sgd_with(
                |yy: &Vector, rng: &mut _| prob.noisy_grad_y(noise, &x, yy, rng),
                &y,
                &inner,
                Sign::Max,
                &mut y_rng,
                None,
                |k, _| k_done = k,
            );
            match res {
                Ok(r) => y = r.y_final,
                Err(e) => {
                    divergence = Some(inner_failure(t, k_done, e)?);
                    break;
                }
            }
            if let Some(reason) = blown_up(&y) {
                divergence = Some(Divergence {
                    t,
                    inner_step: Some(cfg.inner_steps),
                    reason,
                });
                break;
            }
            if recording {
                res_y = grader.residual(&x, &y);
            }
            let mut gx = prob.noisy_grad_x(noise, &x, &y, &mut outer_rng);
            clip_in_place(&mut gx, tau_x);
            x.axpy(-cfg.eta_x, &gx, 1.0);
        }
        if let Some(reason) = blown_up(&x) {
            divergence = Some(Divergence {
                t,
                inner_step: None,
                reason,
            });
            break;
        }
        last_good = (t, x.clone());
        let row = recording.then(|| (grader.grad_norm(&x), res_y, None));
        rec.after_step(t, &x, row);
        if rec.wants_snapshot(t) {
            rec.snapshot(t, &x, &y, None);
        }
    }
    Ok(rec.finish(x.clone(), y, last_good, initial, divergence))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_two_player_game;
    use nalgebra::DVector;

    #[test]
    fn sgda_accounting_is_two_per_step() {
        let g = make_two_player_game(0, 1.0, 1.0).unwrap();
        let mut cfg = AlgoConfig::new(Algo::Sgda, 1e-3, 1e-2, 7, 1).unwrap();
        cfg.cadence = Some(1);
        let x0 = DVector::from_element(30, 0.1);
        let y0 = DVector::zeros(30);
        let noise = NoiseModel::gaussian(0.1).unwrap();
        let tr = run_baseline(&g, &cfg, &noise, Metrics::none(), &x0, &y0, &RngStream::new(1, 2)).unwrap();
        let sfo: Vec<u64> = tr.rows.iter().map(|r| r.sfo).collect();
        assert_eq!(sfo, (1..=7).map(|t| 2 * t).collect::<Vec<u64>>());
        assert_eq!(tr.sfo_total, cfg.sfo_budget());
    }

    #[test]
    fn wrong_algo_is_config_error() {
        let g = make_two_player_game(0, 1.0, 1.0).unwrap();
        let cfg = AlgoConfig::new(Algo::N2sgda, 1e-3, 1e-2, 2, 1).unwrap();
        let x0 = DVector::zeros(30);
        let r = run_baseline(&g, &cfg, &NoiseModel::none(), Metrics::none(), &x0, &x0, &RngStream::new(0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
