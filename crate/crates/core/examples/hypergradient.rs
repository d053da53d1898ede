//! Exact hypergradient of a quadratic bilevel problem against its penalty
//! surrogate for growing penalty weights.

use htbilevel::problems::{hypergradient, penalty_hypergradient, QuadraticBilevel};
use nalgebra::DVector;

fn main() -> htbilevel::Result<()> {
    let prob = QuadraticBilevel::random(0, 5, 5);
    let x = DVector::from_element(5, 0.5);
    let exact = hypergradient(&prob, &x)?;
    println!("|grad phi| = {:.4}", exact.norm());
    for lambda in [1e1, 1e2, 1e3, 1e4] {
        let approx = penalty_hypergradient(&prob, &x, lambda)?;
        println!("lambda {lambda:>7}: gap {:.3e}", (approx - &exact).norm());
    }
    Ok(())
}
