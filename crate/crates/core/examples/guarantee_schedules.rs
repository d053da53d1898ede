//! Loop counts, step sizes and radii implied by the convergence guarantees.

use htbilevel::algorithms::{config_from_guarantee, Guarantee, GuaranteeInputs};

fn main() -> htbilevel::Result<()> {
    let inputs = GuaranteeInputs {
        ell: Some(2.0),
        mu: Some(1.0),
        sigma_f: Some(1.0),
        sigma_g: Some(1.0),
        p: Some(1.5),
        epsilon: Some(0.5),
        delta: Some(0.01),
        gap: Some(1.0),
        r0: Some(1.0),
        ..GuaranteeInputs::default()
    };
    for which in [
        Guarantee::BilevelInExpectation,
        Guarantee::BilevelHighProbability,
        Guarantee::MinimaxInExpectation,
        Guarantee::MinimaxHighProbability,
    ] {
        let cfg = config_from_guarantee(&inputs, which)?;
        println!(
            "{which:?}: T={} K={} M={} eta_x={:.2e} lambda={:?} sfo={:.3e}",
            cfg.outer_steps,
            cfg.inner_steps,
            cfg.batch,
            cfg.eta_x,
            cfg.lambda,
            cfg.sfo_budget() as f64
        );
    }
    Ok(())
}
