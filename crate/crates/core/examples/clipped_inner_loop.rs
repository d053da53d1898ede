//! Clipped SGD on a strongly convex quadratic with the theory schedule.

use htbilevel::clipsgd::{clipped_sgd, in_expectation_bound, theory_schedule, InnerMode, Sign};
use htbilevel::noise::{NoiseModel, RngStream};
use htbilevel::Vector;
use nalgebra::DVector;

fn main() -> htbilevel::Result<()> {
    let hess = DVector::from_fn(10, |i, _| 1.0 + i as f64);
    let target = DVector::zeros(10);
    let y0 = DVector::from_element(10, 0.3);
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let sigma = noise.sigma_for_dim(10);

    let steps = 5_000;
    let sched = theory_schedule(1.0, 10.0, sigma, noise.p(), steps, 2.0, InnerMode::InExpectation)?;
    let out = clipped_sgd(
        |y: &Vector, rng: &mut _| {
            let mut g = y.component_mul(&hess);
            noise.perturb(&mut g, rng);
            g
        },
        &y0,
        &sched,
        Sign::Min,
        &RngStream::new(0, 0),
        Some(&target),
    )?;
    let bound = in_expectation_bound(1.0, 10.0, sigma, noise.p(), steps, 2.0)?;
    println!(
        "initial {:.3e}, final squared residual {:.3e}, expected-value bound {bound:.3e}, {} oracle calls",
        y0.norm_squared(),
        out.residual_sq.unwrap(),
        out.sfo_used
    );
    Ok(())
}
