use rand::Rng;

use super::{blown_up, normalized_step, role, AlgoConfig, Algo, Divergence, Metrics, Recorder, RunTrace};
use crate::clipsgd::{clipped_sgd_with, Sign};
use crate::error::{Error, Result};
use crate::noise::{NoiseModel, RngStream};
use crate::problems::{hypergradient, lower_solution, penalty_solution, BilevelProblem};
use crate::Vector;

/// Noise laws of the upper- and lower-level oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct BilevelNoise {
    pub f: NoiseModel,
    pub g: NoiseModel,
}

impl BilevelNoise {
    pub fn same(model: NoiseModel) -> Self {
        BilevelNoise {
            f: model.clone(),
            g: model,
        }
    }
}

/// Minibatch estimate of ∇L*_λ(x) from inner approximations `y ≈ y*_λ(x)`
/// and `z ≈ y*(x)`.
///
/// Each sample draws ξ_i for the upper level and one ζ_i that is shared by
/// both lower-level evaluations, so the difference `(∇_x g(x,y) + ζ_i) −
/// (∇_x g(x,z) + ζ_i)` is formed literally. With `y = z` the penalty term is
/// exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn n2sba_outer_gradient<P: BilevelProblem, R: Rng + ?Sized>(
    prob: &P,
    noise: &BilevelNoise,
    x: &Vector,
    y: &Vector,
    z: &Vector,
    lambda: f64,
    batch: usize,
    rng: &mut R,
) -> Vector {
    let dx = x.len();
    let gx_y = prob.grad_g_x(x, y);
    let gx_z = prob.grad_g_x(x, z);
    let mut acc = Vector::zeros(dx);
    for _ in 0..batch {
        let upper = prob.noisy_grad_f_x(&noise.f, x, y, rng);
        let zeta = noise.g.sample_with(dx, rng);
        let at_y = &gx_y + &zeta;
        let at_z = &gx_z + &zeta;
        acc += upper;
        acc.axpy(lambda, &(at_y - at_z), 1.0);
    }
    acc / batch as f64
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

/// Nested-loop normalized stochastic bilevel approximation.
///
/// Inner loops run clipped SGD on `λ g(x_t, ·)` (the z sequence) and on
/// `f(x_t, ·) + λ g(x_t, ·)` (the y sequence), both warm-started across outer
/// iterations. The outer step is a normalized step along
/// [`n2sba_outer_gradient`]. Divergence is recorded in the trace; use
/// [`RunTrace::check`] to turn it into an error.
pub fn run_n2sba<P: BilevelProblem>(
    prob: &P,
    cfg: &AlgoConfig,
    noise: &BilevelNoise,
    metrics: Metrics,
    x0: &Vector,
    y0: &Vector,
    stream: &RngStream,
) -> Result<RunTrace> {
    if cfg.algo != Algo::N2sba {
        return Err(Error::config(format!("run_n2sba called with algo {}", cfg.algo)));
    }
    cfg.validate()?;
    if x0.len() != prob.dim_x() || y0.len() != prob.dim_y() {
        return Err(Error::config(format!(
            "initial point has dimensions ({}, {}), problem expects ({}, {})",
            x0.len(),
            y0.len(),
            prob.dim_x(),
            prob.dim_y()
        )));
    }
    let lambda = cfg.lambda.expect("validated");
    if let Some(min) = prob.constants().min_lambda() {
        if lambda < min {
            return Err(Error::config(format!("lambda = {lambda} is below 2 L_f / mu = {min}")));
        }
    }
    let sched_z = cfg.inner_z.as_ref().expect("validated");
    let sched_y = &cfg.inner_y;

    let mut z_rng = stream.derive(role::Z_LOOP).generator();
    let mut y_rng = stream.derive(role::Y_LOOP).generator();
    let mut outer_rng = stream.derive(role::OUTER).generator();
    let mut rec = Recorder::new(cfg, &mut stream.derive(role::REPORT).generator());

    let grad_metric = |x: &Vector| {
        if metrics.grad_norm {
            hypergradient(prob, x).ok().map(|g| g.norm())
        } else {
            None
        }
    };
    let initial = grad_metric(x0);

    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut z = y0.clone();
    let mut last_good = (0usize, x.clone());
    let mut divergence = None;
    if cfg.snapshot_every.is_some() {
        rec.snapshot(0, &x, &y, Some(&z));
    }

    for t in 1..=cfg.outer_steps {
        let mut k_done = 0;
        let z_res = clipped_sgd_with(
            |zz: &Vector, rng: &mut _| prob.noisy_grad_g_y(&noise.g, &x, zz, rng) * lambda,
            &z,
            sched_z,
            Sign::Min,
            &mut z_rng,
            None,
            |k, _| k_done = k,
        );
        match z_res {
            Ok(r) => z = r.y_final,
            Err(e) => {
                divergence = Some(inner_failure(t, k_done, e)?);
                break;
            }
        }
        let mut k_done = 0;
        let y_res = clipped_sgd_with(
            |yy: &Vector, rng: &mut _| {
                let mut g = prob.noisy_grad_f_y(&noise.f, &x, yy, rng);
                g.axpy(lambda, &prob.noisy_grad_g_y(&noise.g, &x, yy, rng), 1.0);
                g
            },
            &y,
            sched_y,
            Sign::Min,
            &mut y_rng,
            None,
            |k, _| k_done = k,
        );
        match y_res {
            Ok(r) => y = r.y_final,
            Err(e) => {
                divergence = Some(inner_failure(t, k_done, e)?);
                break;
            }
        }
        if let Some(reason) = blown_up(&y).or_else(|| blown_up(&z)) {
            divergence = Some(Divergence {
                t,
                inner_step: Some(cfg.inner_steps),
                reason,
            });
            break;
        }

        let recording = rec.records(t);
        let (res_y, res_z) = if recording && metrics.inner_residuals {
            (
                penalty_solution(prob, &x, lambda).ok().map(|s| (&y - s).norm()),
                lower_solution(prob, &x).ok().map(|s| (&z - s).norm()),
            )
        } else {
            (None, None)
        };

        let g = n2sba_outer_gradient(prob, noise, &x, &y, &z, lambda, cfg.batch, &mut outer_rng);
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
        let row = recording.then(|| (grad_metric(&x), res_y, res_z));
        rec.after_step(t, &x, row);
        if rec.wants_snapshot(t) {
            rec.snapshot(t, &x, &y, Some(&z));
        }
    }
    Ok(rec.finish(x.clone(), y, last_good, initial, divergence))
}
