use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use htbilevel::harness::{grid_search, run_experiment, ExperimentReport, ExperimentSpec, RunOptions, Selection};
use htbilevel::selftest::run_selftest;
use htbilevel::Error;

/// Clipped and normalized stochastic bilevel and minimax methods.
#[derive(Parser, Debug)]
#[command(name = "htbilevel", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory; overrides `out_dir` in the spec.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Concurrent runs; overrides the spec.
    #[arg(long, global = true, env = "HTBILEVEL_WORKERS")]
    workers: Option<usize>,

    /// Base seed; overrides the spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every grid point of a spec and write CSVs.
    Run { spec: PathBuf },
    /// Run the grid and report the best point per algorithm.
    Grid { spec: PathBuf },
    /// Check a spec without running it.
    Validate { spec: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Numerical(_) => ExitCode::from(EXIT_NUMERICAL),
        _ => ExitCode::from(EXIT_CONFIG),
    }
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions {
        out_dir: cli.out.clone(),
        workers: cli.workers,
        seed: cli.seed,
    }
}

fn summarize(report: &ExperimentReport) {
    for p in &report.points {
        println!(
            "{:<16} grid {:>3}  runs {:>3}  diverged {:>3}  sfo {:>10}  score {:.4e}",
            p.point.label,
            p.point.grid_id,
            p.traces.len(),
            p.divergence_count(),
            p.point.cfg.sfo_budget(),
            p.score()
        );
    }
    if let Some(dir) = &report.out_dir {
        println!("wrote {}", dir.display());
    }
}

fn report_failures(failures: &[String]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in failures {
        eprintln!("diverged: {f}");
    }
    ExitCode::from(EXIT_NUMERICAL)
}

fn load(path: &Path) -> Result<ExperimentSpec, Error> {
    ExperimentSpec::from_file(path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match &cli.command {
        Command::Run { spec } => {
            let report = match load(spec).and_then(|s| run_experiment(&s, &options(&cli))) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            summarize(&report);
            report_failures(&report.nested_failures())
        }
        Command::Grid { spec } => {
            let (report, selections) = match load(spec).and_then(|s| grid_search(&s, &options(&cli))) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            summarize(&report);
            let mut unstable = Vec::new();
            for sel in &selections {
                match sel {
                    Selection::Best {
                        algo,
                        grid_id,
                        label,
                        params,
                        score,
                        ..
                    } => {
                        let params: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
                        println!("best {algo}: {label} grid {grid_id} score {score:.4e} [{}]", params.join(", "));
                    }
                    Selection::NoStableConfiguration { algo } => {
                        println!("best {algo}: no stable configuration");
                        if !algo.is_baseline() {
                            unstable.push(format!("{algo}: every grid point diverged"));
                        }
                    }
                }
            }
            report_failures(&unstable)
        }
        Command::Validate { spec } => {
            let checked = load(spec).and_then(|s| {
                let instance = s.build_problem()?;
                let grid = s.validate(&instance)?;
                Ok((s, grid))
            });
            match checked {
                Ok((s, grid)) => {
                    for p in &grid {
                        println!(
                            "{:<16} grid {:>3}  T {:>7}  K {:>4}  M {:>4}  sfo {:>10}",
                            p.label,
                            p.grid_id,
                            p.cfg.outer_steps,
                            p.cfg.inner_steps,
                            p.cfg.batch,
                            p.cfg.sfo_budget()
                        );
                    }
                    println!("{}: {} grid points x {} runs = {} runs", s.name, grid.len(), s.n_runs, grid.len() * s.n_runs);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Selftest => {
            let checks = run_selftest();
            let mut ok = true;
            for c in &checks {
                println!("{} {:<42} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}
