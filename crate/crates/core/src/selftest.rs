//! Fast invariant checks behind the `selftest` subcommand.
//!
//! Each check is small enough to run in a debug build within seconds. The
//! integration tests cover the same ground at full scale.

use rand::Rng;

use crate::algorithms::{run_baseline, run_n2sba, run_n2sgda, Algo, AlgoConfig, BilevelNoise, Metrics, RunTrace};
use crate::clipsgd::{clipped_sgd_with, InnerSchedule, Sign};
use crate::error::Result;
use crate::noise::{clip, NoiseModel, RngStream};
use crate::problems::{hypergradient, BilevelProblem, MinimaxProblem, QuadraticBilevel, TwoPlayerGame};
use crate::Vector;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: &'static str, r: Result<std::result::Result<String, String>>) -> Self {
        match r {
            Ok(Ok(detail)) => Check { name, passed: true, detail },
            Ok(Err(detail)) => Check { name, passed: false, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

type Outcome = Result<std::result::Result<String, String>>;

/// Runs every check; never panics.
pub fn run_selftest() -> Vec<Check> {
    type Named = (&'static str, fn() -> Outcome);
    let checks: [Named; 8] = [
        ("clip_examples", clip_examples),
        ("clip_bounds", clip_bounds),
        ("inner_displacement", inner_displacement),
        ("hypergradient_matches_finite_differences", hypergradient_fd),
        ("sfo_matches_closed_form", sfo_accounting),
        ("runs_are_deterministic", determinism),
        ("infinite_radius_clip_is_identity", clip_noop_baseline),
        ("stream_prefix_is_stable", stream_prefix),
    ];
    checks.iter().map(|(name, f)| Check::from_result(name, f())).collect()
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Ok(if ok { Ok(detail) } else { Err(detail) })
}

fn clip_examples() -> Outcome {
    let zero = clip(&Vector::zeros(3), 5.0)?;
    let unit = Vector::from_vec(vec![0.6, 0.8]);
    let long = Vector::from_vec(vec![6.0, 8.0]);
    let ok = zero == Vector::zeros(3) && clip(&unit, 5.0)? == unit && clip(&long, 5.0)? == &long / 2.0;
    verdict(ok, "0 -> 0, |v|=1 unchanged, |v|=10 halved at radius 5".into())
}

fn clip_bounds() -> Outcome {
    let mut rng = RngStream::new(1, 0xc1).generator();
    let n = 10_000;
    for i in 0..n {
        let dim = rng.random_range(1..=8);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v = Vector::from_fn(dim, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0));
        let tau = 10f64.powf(rng.random_range(-3.0..3.0));
        let c = clip(&v, tau)?;
        let bound = v.norm().min(tau) * (1.0 + 1e-12);
        let factor = c.dot(&v) / v.norm_squared();
        let parallel = (&c - &v * factor).norm() <= 1e-12 * v.norm();
        if c.norm() > bound || !(factor > 0.0 && factor <= 1.0 + 1e-12) || !parallel {
            return verdict(false, format!("pair {i} violates the clip bounds"));
        }
    }
    verdict(true, format!("{n} random pairs"))
}

fn inner_displacement() -> Outcome {
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let sched = InnerSchedule::manual(0.1, 0.5, 500)?;
    let target = Vector::from_element(4, 3.0);
    let mut rng = RngStream::new(2, 0x1d).generator();
    let mut prev = Vector::zeros(4);
    let mut worst: f64 = 0.0;
    clipped_sgd_with(
        |y: &Vector, r: &mut _| {
            let mut g = y - &target;
            noise.perturb(&mut g, r);
            g
        },
        &prev.clone(),
        &sched,
        Sign::Min,
        &mut rng,
        None,
        |_, y| {
            worst = worst.max((y - &prev).norm());
            prev.copy_from(y);
        },
    )?;
    let cap = sched.eta * 0.5;
    verdict(worst <= cap * (1.0 + 1e-12), format!("largest step {worst:.3e}, cap {cap:.3e}"))
}

fn hypergradient_fd() -> Outcome {
    let prob = QuadraticBilevel::random(3, 5, 5);
    let mut rng = RngStream::new(3, 0xfd).generator();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = Vector::from_fn(prob.dim_x(), |_, _| rng.random_range(-1.0..1.0));
        let g = hypergradient(&prob, &x)?;
        let fd = Vector::from_fn(prob.dim_x(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (prob.phi(&xp) - prob.phi(&xm)) / (2.0 * h)
        });
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-12));
    }
    verdict(worst <= 1e-5, format!("worst relative error {worst:.2e}"))
}

fn game() -> Result<TwoPlayerGame> {
    TwoPlayerGame::with_dim(4, 6, 0.1, 1.0)
}

fn minimax_run(algo: Algo, seed: u64) -> Result<RunTrace> {
    let prob = game()?;
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let mut cfg = AlgoConfig::new(algo, 1e-2, 1e-2, 40, 5)?;
    cfg.seed = seed;
    cfg.batch = 3;
    if algo == Algo::ClippedSgdmax {
        cfg.tau_x = Some(5.0);
    }
    let x0 = Vector::from_element(prob.dim_x(), 1.0);
    let y0 = Vector::zeros(prob.dim_y());
    let stream = cfg.stream();
    match algo {
        Algo::N2sgda => run_n2sgda(&prob, &cfg, &noise, Metrics::default(), &x0, &y0, &stream),
        _ => run_baseline(&prob, &cfg, &noise, Metrics::default(), &x0, &y0, &stream),
    }
}

fn sfo_accounting() -> Outcome {
    let mut detail = Vec::new();
    for algo in [Algo::N2sgda, Algo::Sgda, Algo::Sgdmax, Algo::ClippedSgdmax] {
        let trace = minimax_run(algo, 5)?;
        let cfg_budget = {
            let mut cfg = AlgoConfig::new(algo, 1e-2, 1e-2, 40, 5)?;
            cfg.batch = 3;
            cfg.sfo_budget()
        };
        if trace.sfo_total != cfg_budget {
            return verdict(false, format!("{algo}: {} calls, expected {cfg_budget}", trace.sfo_total));
        }
        detail.push(format!("{algo}={cfg_budget}"));
    }
    let prob = QuadraticBilevel::random(6, 3, 3);
    let mut cfg = AlgoConfig::new(Algo::N2sba, 1e-2, 1e-2, 20, 4)?;
    cfg.batch = 2;
    cfg.lambda = Some(prob.constants().min_lambda().unwrap_or(1.0).max(10.0));
    let noise = BilevelNoise::same(NoiseModel::gaussian(0.1)?);
    let trace = run_n2sba(
        &prob,
        &cfg,
        &noise,
        Metrics::none(),
        &Vector::zeros(3),
        &Vector::zeros(3),
        &cfg.stream(),
    )?;
    if trace.sfo_total != cfg.sfo_budget() {
        return verdict(false, format!("n2sba: {} calls, expected {}", trace.sfo_total, cfg.sfo_budget()));
    }
    detail.push(format!("n2sba={}", cfg.sfo_budget()));
    verdict(true, detail.join(" "))
}

fn same_rows(a: &RunTrace, b: &RunTrace) -> bool {
    a.rows.len() == b.rows.len()
        && a.rows.iter().zip(&b.rows).all(|(r, s)| {
            r.t == s.t
                && r.sfo == s.sfo
                && r.grad_norm_true.map(f64::to_bits) == s.grad_norm_true.map(f64::to_bits)
                && r.inner_residual_y.map(f64::to_bits) == s.inner_residual_y.map(f64::to_bits)
                && r.diverged == s.diverged
        })
        && a.x_final == b.x_final
}

fn determinism() -> Outcome {
    let a = minimax_run(Algo::N2sgda, 11)?;
    let b = minimax_run(Algo::N2sgda, 11)?;
    let c = minimax_run(Algo::N2sgda, 12)?;
    verdict(
        same_rows(&a, &b) && a.x_final != c.x_final,
        "same seed repeats, different seed differs".into(),
    )
}

fn clip_noop_baseline() -> Outcome {
    let prob = game()?;
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let plain = AlgoConfig::new(Algo::Sgdmax, 1e-2, 1e-2, 30, 4)?;
    let mut clipped = plain.clone();
    clipped.algo = Algo::ClippedSgdmax;
    clipped.tau_x = Some(f64::INFINITY);
    let x0 = Vector::from_element(prob.dim_x(), 1.0);
    let y0 = Vector::zeros(prob.dim_y());
    let a = run_baseline(&prob, &plain, &noise, Metrics::default(), &x0, &y0, &plain.stream())?;
    let b = run_baseline(&prob, &clipped, &noise, Metrics::default(), &x0, &y0, &clipped.stream())?;
    verdict(same_rows(&a, &b), "clipped_sgdmax with infinite radii equals sgdmax".into())
}

fn stream_prefix() -> Outcome {
    let s = RngStream::new(9, 0x5eed);
    let draw = |n: usize| -> Vec<u64> {
        let mut r = s.generator();
        (0..n).map(|_| r.random()).collect()
    };
    let (a, b) = (draw(4), draw(8));
    verdict(a[..] == b[..4], "longer draws extend shorter ones".into())
}
