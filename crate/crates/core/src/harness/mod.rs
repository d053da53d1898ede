//! Seeded multi-run execution, grid search and CSV output.
//!
//! Output layout for an experiment written to `out/`:
//!
//! - `out/grid.csv`: one line per grid point with its parameters.
//! - `out/raw/<label>_g<grid>_r<run>.csv`: per-run metric rows.
//! - `out/aggregate/<label>_g<grid>.csv`: per-point statistics across runs.
//!
//! Raw and aggregate files are deterministic given the spec, except for the
//! `wall_time_s` column.

mod csvio;
mod spec;

pub use csvio::{aggregate, read_raw_csv, AggregateRow, RawRow, AGGREGATE_HEADER, RAW_HEADER};
pub use spec::{ArmSpec, ExperimentSpec, GridPoint, InitSpec, Instance, OneOrMany, ProblemSpec};

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::algorithms::{run_baseline, run_n2sba, run_n2sgda, Algo, AlgoConfig, BilevelNoise, Metrics, RunTrace};
use crate::error::{Error, Result};
use crate::noise::RngStream;

/// Environment variable consulted for the worker count when no flag is given.
pub const WORKERS_ENV: &str = "HTBILEVEL_WORKERS";

/// Overrides applied on top of a spec.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

/// Flag, then environment, then spec, then available parallelism.
pub fn resolve_workers(flag: Option<usize>, spec: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("{WORKERS_ENV}={v} is not a worker count")))?,
        ),
        _ => None,
    };
    let n = flag
        .or(from_env)
        .or(spec)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::config("worker count must be positive"));
    }
    Ok(n)
}

/// Results of one grid point across all runs.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub point: GridPoint,
    pub traces: Vec<RunTrace>,
    pub aggregate: Vec<AggregateRow>,
}

impl PointResult {
    pub fn divergence_count(&self) -> usize {
        self.traces.iter().filter(|t| t.diverged()).count()
    }

    /// Mean of the final true gradient norm; `+∞` if any run diverged or lacks the metric.
    pub fn score(&self) -> f64 {
        let mut acc = 0.0;
        for t in &self.traces {
            match (t.diverged(), t.final_grad_norm()) {
                (false, Some(g)) if g.is_finite() => acc += g,
                _ => return f64::INFINITY,
            }
        }
        acc / self.traces.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub points: Vec<PointResult>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentReport {
    /// Divergences in nested (non-baseline) arms.
    pub fn nested_failures(&self) -> Vec<String> {
        self.points
            .iter()
            .filter(|p| !p.point.cfg.algo.is_baseline())
            .flat_map(|p| {
                p.traces.iter().enumerate().filter_map(move |(r, t)| {
                    t.divergence
                        .as_ref()
                        .map(|d| format!("{} grid {} run {r}: {d}", p.point.label, p.point.grid_id))
                })
            })
            .collect()
    }
}

fn run_one(instance: &Instance, spec: &ExperimentSpec, cfg: &AlgoConfig, run: usize, stream: &RngStream) -> Result<RunTrace> {
    let (x0, y0) = spec.initial_point(instance, run)?;
    let metrics = Metrics::default();
    match (instance, cfg.algo) {
        (Instance::Quadratic(p), Algo::N2sba) => {
            let noise = BilevelNoise {
                f: spec.noise.clone(),
                g: spec.noise_g().clone(),
            };
            run_n2sba(p, cfg, &noise, metrics, &x0, &y0, stream)
        }
        (Instance::LogReg(p), Algo::N2sba) => {
            let noise = BilevelNoise {
                f: spec.noise.clone(),
                g: spec.noise_g().clone(),
            };
            run_n2sba(p, cfg, &noise, metrics, &x0, &y0, stream)
        }
        (Instance::Game(p), Algo::N2sgda) => run_n2sgda(p, cfg, &spec.noise, metrics, &x0, &y0, stream),
        (Instance::Separable(p), Algo::N2sgda) => run_n2sgda(p, cfg, &spec.noise, metrics, &x0, &y0, stream),
        (Instance::Game(p), a) if a.is_baseline() => run_baseline(p, cfg, &spec.noise, metrics, &x0, &y0, stream),
        (Instance::Separable(p), a) if a.is_baseline() => {
            run_baseline(p, cfg, &spec.noise, metrics, &x0, &y0, stream)
        }
        (_, a) => Err(Error::config(format!("algorithm {a} does not apply to this problem"))),
    }
}

/// File-name-safe version of a label.
fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn raw_path(dir: &Path, point: &GridPoint, run: usize) -> PathBuf {
    dir.join("raw")
        .join(format!("{}_g{}_r{}.csv", slug(&point.label), point.grid_id, run))
}

pub fn aggregate_path(dir: &Path, point: &GridPoint) -> PathBuf {
    dir.join("aggregate")
        .join(format!("{}_g{}.csv", slug(&point.label), point.grid_id))
}

/// Runs every grid point `n_runs` times and writes the CSV files.
///
/// Configuration errors surface before any run starts. Numerical failures
/// inside runs are recorded as diverged rows and reported through
/// [`ExperimentReport::nested_failures`].
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentReport> {
    let mut spec = spec.clone();
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    let instance = spec.build_problem()?;
    let grid = spec.validate(&instance)?;
    let workers = resolve_workers(opts.workers, spec.workers)?;
    let out_dir = opts.out_dir.clone().or_else(|| spec.out_dir.clone());
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir.join("raw"))?;
        std::fs::create_dir_all(dir.join("aggregate"))?;
    }

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..spec.n_runs).map(move |r| (g, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    let results: Vec<Result<RunTrace>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, r)| {
                let point = &grid[g];
                let mut cfg = point.cfg.clone();
                cfg.seed = spec.seed;
                let trace = run_one(&instance, &spec, &cfg, r, &spec.run_stream(point.grid_id, r))?;
                if let Some(dir) = &out_dir {
                    csvio::write_raw(&raw_path(dir, point, r), point, r, &trace)?;
                }
                Ok(trace)
            })
            .collect()
    });

    let mut traces = results.into_iter();
    let mut points = Vec::with_capacity(grid.len());
    for point in grid {
        let mut runs = Vec::with_capacity(spec.n_runs);
        for _ in 0..spec.n_runs {
            runs.push(traces.next().expect("one result per job")?);
        }
        let agg = aggregate(&point, &runs);
        if let Some(dir) = &out_dir {
            csvio::write_aggregate(&aggregate_path(dir, &point), &agg)?;
        }
        points.push(PointResult {
            point,
            traces: runs,
            aggregate: agg,
        });
    }
    if let Some(dir) = &out_dir {
        csvio::write_grid_index(&dir.join("grid.csv"), &points)?;
    }
    Ok(ExperimentReport {
        name: spec.name.clone(),
        points,
        out_dir,
    })
}

/// Outcome of tuning one algorithm.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Selection {
    Best {
        algo: Algo,
        grid_id: usize,
        label: String,
        cfg: AlgoConfig,
        params: Vec<(&'static str, f64)>,
        score: f64,
    },
    NoStableConfiguration {
        algo: Algo,
    },
}

impl Selection {
    pub fn algo(&self) -> Algo {
        match self {
            Selection::Best { algo, .. } | Selection::NoStableConfiguration { algo } => *algo,
        }
    }
}

/// Picks, per algorithm, the grid point with the smallest mean final true
/// gradient norm. Points with any diverged run score `+∞`; ties go to the
/// first listed point.
pub fn select_best(report: &ExperimentReport) -> Vec<Selection> {
    let mut algos: Vec<Algo> = Vec::new();
    for p in &report.points {
        if !algos.contains(&p.point.cfg.algo) {
            algos.push(p.point.cfg.algo);
        }
    }
    algos
        .into_iter()
        .map(|algo| {
            let mut best: Option<(&PointResult, f64)> = None;
            for p in report.points.iter().filter(|p| p.point.cfg.algo == algo) {
                let s = p.score();
                if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
                    best = Some((p, s));
                }
            }
            match best {
                Some((p, score)) => Selection::Best {
                    algo,
                    grid_id: p.point.grid_id,
                    label: p.point.label.clone(),
                    cfg: p.point.cfg.clone(),
                    params: p.point.params.clone(),
                    score,
                },
                None => Selection::NoStableConfiguration { algo },
            }
        })
        .collect()
}

/// Runs the full grid and selects the best point per algorithm.
pub fn grid_search(spec: &ExperimentSpec, opts: &RunOptions) -> Result<(ExperimentReport, Vec<Selection>)> {
    let report = run_experiment(spec, opts)?;
    let sel = select_best(&report);
    Ok((report, sel))
}
