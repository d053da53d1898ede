//! N2SBA on a quadratic bilevel problem under heavy-tailed noise.

use htbilevel::algorithms::{run_n2sba, Algo, AlgoConfig, BilevelNoise, Metrics};
use htbilevel::clipsgd::InnerSchedule;
use htbilevel::noise::{NoiseModel, RngStream};
use htbilevel::problems::QuadraticBilevel;
use nalgebra::DVector;

fn main() -> htbilevel::Result<()> {
    let prob = QuadraticBilevel::random(0, 5, 5);
    let (t, k) = (1000, 10);
    let mut cfg = AlgoConfig::new(Algo::N2sba, 1e-2, 1e-2, t, k)?;
    cfg.batch = 10;
    cfg.lambda = Some(10.0);
    cfg.inner_y = InnerSchedule::manual(1e-2, 10.0, k)?;
    cfg.inner_z = Some(InnerSchedule::manual(1e-2, 10.0, k)?);
    cfg.cadence = Some(100);

    let noise = BilevelNoise::same(NoiseModel::shifted_pareto(1.5, 0.1, 1.4)?);
    let x0 = DVector::from_element(5, 1.0);
    let trace = run_n2sba(&prob, &cfg, &noise, Metrics::default(), &x0, &DVector::zeros(5), &RngStream::new(0, 0))?;
    trace.check()?;
    println!("t=0 |grad phi| = {:.4}", trace.initial_grad_norm.unwrap());
    for row in &trace.rows {
        println!("t={:<5} sfo={:<8} |grad phi| = {:.4}", row.t, row.sfo, row.grad_norm_true.unwrap());
    }
    Ok(())
}
