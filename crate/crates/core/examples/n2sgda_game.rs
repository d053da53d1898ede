//! N2SGDA against plain SGDA on the two-player game at equal oracle budget.

use htbilevel::algorithms::{run_baseline, run_n2sgda, Algo, AlgoConfig, Metrics};
use htbilevel::clipsgd::InnerSchedule;
use htbilevel::noise::{NoiseModel, RngStream};
use htbilevel::problems::make_two_player_game;
use nalgebra::DVector;

fn main() -> htbilevel::Result<()> {
    let game = make_two_player_game(0, 1.0, 1.0)?;
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let x0 = DVector::from_element(game.dim(), 1.0);
    let y0 = DVector::zeros(game.dim());
    let stream = RngStream::new(0, 0);

    let mut nested = AlgoConfig::new(Algo::N2sgda, 3e-3, 0.1, 5000, 10)?;
    nested.inner_y = InnerSchedule::manual(0.1, 10.0, 10)?;
    let sgda = AlgoConfig::new(Algo::Sgda, 3e-5, 1e-2, nested.sfo_budget() as usize / 2, 1)?;

    let a = run_n2sgda(&game, &nested, &noise, Metrics::default(), &x0, &y0, &stream)?;
    let b = run_baseline(&game, &sgda, &noise, Metrics::default(), &x0, &y0, &stream)?;
    println!("initial |grad Phi| = {:.3}", a.initial_grad_norm.unwrap());
    for (name, tr) in [("n2sgda", &a), ("sgda", &b)] {
        println!("{name:<7} sfo {:>6}  final |grad Phi| = {:.3}", tr.sfo_total, tr.final_grad_norm().unwrap());
    }
    Ok(())
}
