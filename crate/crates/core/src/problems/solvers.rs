//! Deterministic inner solvers used by the metric oracles.
//!
//! Newton with backtracking when second-order information exists, otherwise
//! gradient descent with Armijo backtracking.

use nalgebra::DVector;

use super::{solve_spd, BilevelProblem, MinimaxProblem};
use crate::error::{Error, Result};
use crate::Vector;

/// Gradient-norm target of every metric solve.
pub const INNER_TOL: f64 = 1e-10;

const MAX_NEWTON: usize = 100;
const MAX_GRADIENT_STEPS: usize = 1_000_000;

/// Minimizes g(x,·) (`lambda = None`) or f(x,·) + λ g(x,·) over y.
pub fn minimize_lower<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector, lambda: Option<f64>) -> Result<Vector> {
    let value = |y: &Vector| match lambda {
        None => prob.g(x, y),
        Some(l) => prob.f(x, y) + l * prob.g(x, y),
    };
    let grad = |y: &Vector| match lambda {
        None => prob.grad_g_y(x, y),
        Some(l) => prob.grad_f_y(x, y) + prob.grad_g_y(x, y) * l,
    };
    let tol = INNER_TOL * lambda.unwrap_or(1.0).max(1.0);
    let y0 = DVector::zeros(prob.dim_y());

    let hessian = |y: &Vector| {
        let so = prob.second_order_g(x, y)?;
        match lambda {
            None => Some(so.yy),
            Some(l) => Some(prob.hessian_f_yy(x, y)? + so.yy * l),
        }
    };
    if hessian(&y0).is_some() {
        newton(value, grad, |y| hessian(y).expect("hessian availability is uniform"), y0, tol)
    } else {
        armijo_descent(value, grad, y0, tol)
    }
}

/// Maximizes f(x,·) by Armijo ascent.
pub fn maximize_inner<P: MinimaxProblem + ?Sized>(prob: &P, x: &Vector) -> Result<Vector> {
    armijo_descent(
        |y| -prob.f(x, y),
        |y| -prob.grad_y(x, y),
        DVector::zeros(prob.dim_y()),
        INNER_TOL,
    )
}

fn newton(
    value: impl Fn(&Vector) -> f64,
    grad: impl Fn(&Vector) -> Vector,
    hess: impl Fn(&Vector) -> nalgebra::DMatrix<f64>,
    mut y: Vector,
    tol: f64,
) -> Result<Vector> {
    // Once the target is met, polish with a few extra steps and keep the best
    // iterate: finite-difference oracles downstream need near machine precision.
    let mut polish = 0;
    let mut best: Option<(f64, Vector)> = None;
    for _ in 0..MAX_NEWTON {
        let gr = grad(&y);
        let gnorm = gr.norm();
        if !gnorm.is_finite() {
            return Err(Error::numerical("non-finite gradient in Newton solve"));
        }
        if best.as_ref().is_none_or(|(b, _)| gnorm < *b) {
            best = Some((gnorm, y.clone()));
        }
        if gnorm <= tol {
            polish += 1;
            if polish > 3 || gnorm == 0.0 {
                break;
            }
        }
        let step = solve_spd(&hess(&y), &gr)?;
        let f0 = value(&y);
        let slope = gr.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &y - &step * t;
            // Near the optimum value differences drop below float resolution;
            // a shrinking gradient is then the reliable progress signal.
            if value(&cand) <= f0 - 1e-4 * t * slope || grad(&cand).norm() < gnorm || t < 1e-10 {
                y = cand;
                break;
            }
            t *= 0.5;
        }
    }
    match best {
        Some((gnorm, y)) if gnorm <= tol => Ok(y),
        Some((gnorm, _)) => Err(Error::numerical(format!(
            "Newton solve stalled with gradient norm {gnorm:.3e} > {tol:.1e}"
        ))),
        None => unreachable!("at least one Newton iteration runs"),
    }
}

fn armijo_descent(
    value: impl Fn(&Vector) -> f64,
    grad: impl Fn(&Vector) -> Vector,
    mut y: Vector,
    tol: f64,
) -> Result<Vector> {
    let mut t = 1.0;
    for _ in 0..MAX_GRADIENT_STEPS {
        let gr = grad(&y);
        let gsq = gr.norm_squared();
        if !gsq.is_finite() {
            return Err(Error::numerical("non-finite gradient in inner solve"));
        }
        if gsq.sqrt() <= tol {
            return Ok(y);
        }
        let f0 = value(&y);
        loop {
            let cand = &y - &gr * t;
            let decrease = 0.5 * t * gsq;
            let accept = if decrease > 1e-13 * f0.abs().max(1e-300) {
                value(&cand) <= f0 - decrease
            } else {
                // value differences are below roundoff; fall back to the gradient
                grad(&cand).norm_squared() < gsq
            };
            if accept {
                y = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-300 {
                return Err(Error::numerical("Armijo backtracking underflow"));
            }
        }
        t *= 2.0;
    }
    Err(Error::numerical(format!(
        "inner solve did not reach gradient norm {tol:.1e} in {MAX_GRADIENT_STEPS} steps"
    )))
}
