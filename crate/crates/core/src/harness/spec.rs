//! Experiment specification files.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Algo, AlgoConfig, ReportRule};
use crate::clipsgd::InnerSchedule;
use crate::error::{Error, Result};
use crate::noise::{mix64, NoiseModel, RngStream};
use crate::problems::{
    make_two_player_game, BilevelConstants, BilevelProblem, LearnableRegLogReg, LogRegSettings, MinimaxConstants,
    MinimaxProblem, QuadraticBilevel, SeparableGame, TwoPlayerGame,
};
use crate::Vector;

/// A scalar or a list of grid values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_runs() -> usize {
    20
}

fn default_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    TwoPlayerGame {
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        m1: f64,
        #[serde(default = "one")]
        m2: f64,
        dim: Option<usize>,
    },
    QuadraticBilevel {
        #[serde(default)]
        seed: u64,
        dim_x: usize,
        dim_y: usize,
    },
    /// A serialized [`QuadraticBilevel`]; relative paths resolve against the spec file.
    QuadraticInstance { path: PathBuf },
    LearnableReg {
        #[serde(default)]
        settings: LogRegSettings,
    },
    Separable {
        dim_x: usize,
        #[serde(default = "one")]
        mu: f64,
        center: Vec<f64>,
    },
}

/// A built problem instance.
#[derive(Clone, Debug)]
pub enum Instance {
    Game(TwoPlayerGame),
    Separable(SeparableGame),
    Quadratic(QuadraticBilevel),
    LogReg(LearnableRegLogReg),
}

impl Instance {
    pub fn is_bilevel(&self) -> bool {
        matches!(self, Instance::Quadratic(_) | Instance::LogReg(_))
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Instance::Game(p) => (MinimaxProblem::dim_x(p), MinimaxProblem::dim_y(p)),
            Instance::Separable(p) => (p.dim_x(), p.dim_y()),
            Instance::Quadratic(p) => (p.dim_x(), p.dim_y()),
            Instance::LogReg(p) => (p.dim_x(), p.dim_y()),
        }
    }

    pub fn bilevel_constants(&self) -> Option<BilevelConstants> {
        match self {
            Instance::Quadratic(p) => Some(p.constants()),
            Instance::LogReg(p) => Some(p.constants()),
            _ => None,
        }
    }

    pub fn minimax_constants(&self) -> Option<MinimaxConstants> {
        match self {
            Instance::Game(p) => Some(p.constants()),
            Instance::Separable(p) => Some(p.constants()),
            _ => None,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Instance> {
        Ok(match self {
            ProblemSpec::TwoPlayerGame { seed, m1, m2, dim } => Instance::Game(match dim {
                Some(d) => TwoPlayerGame::with_dim(*seed, *d, *m1, *m2)?,
                None => make_two_player_game(*seed, *m1, *m2)?,
            }),
            ProblemSpec::QuadraticBilevel { seed, dim_x, dim_y } => {
                if *dim_x == 0 || *dim_y == 0 {
                    return Err(Error::config("quadratic dimensions must be positive"));
                }
                Instance::Quadratic(QuadraticBilevel::random(*seed, *dim_x, *dim_y))
            }
            ProblemSpec::QuadraticInstance { path } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| Error::config(format!("cannot read instance {}: {e}", full.display())))?;
                Instance::Quadratic(QuadraticBilevel::from_toml(&text)?)
            }
            ProblemSpec::LearnableReg { settings } => Instance::LogReg(LearnableRegLogReg::generate(settings)?),
            ProblemSpec::Separable { dim_x, mu, center } => {
                if *dim_x == 0 || center.is_empty() || !(*mu > 0.0) {
                    return Err(Error::config("separable game needs positive dimensions and mu"));
                }
                Instance::Separable(SeparableGame::new(*dim_x, DVector::from_vec(center.clone()), *mu))
            }
        })
    }
}

/// One algorithm with possibly gridded parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub algo: Algo,
    /// Display name; defaults to the algorithm name.
    pub label: Option<String>,
    pub eta_x: OneOrMany<f64>,
    pub eta_y: OneOrMany<f64>,
    /// z-loop stepsize (n2sba); defaults to `eta_y`.
    pub eta_z: Option<OneOrMany<f64>>,
    /// Constant inner clipping radius; unclipped when absent.
    pub tau_y: Option<OneOrMany<f64>>,
    /// z-loop radius (n2sba); defaults to `tau_y`.
    pub tau_z: Option<OneOrMany<f64>>,
    /// Outer clipping radius (clipped_sgdmax).
    pub tau_x: Option<OneOrMany<f64>>,
    pub lambda: Option<OneOrMany<f64>>,
    /// T; derived from the experiment's `sfo_budget` when absent.
    #[serde(alias = "T")]
    pub outer_steps: Option<usize>,
    #[serde(alias = "K", default = "default_steps")]
    pub inner_steps: usize,
    #[serde(alias = "M", default = "default_steps")]
    pub batch: usize,
    #[serde(default)]
    pub report: ReportRule,
}

impl ArmSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algo.name().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    /// x_0 ~ N(0, x0_scale² I), drawn per run and shared by all arms.
    #[serde(default = "one")]
    pub x0_scale: f64,
    /// Fixed x_0 instead of a random draw.
    pub x0: Option<Vec<f64>>,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { x0_scale: 1.0, x0: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub problem: ProblemSpec,
    /// Noise of the upper-level (or minimax) oracle.
    pub noise: NoiseModel,
    /// Noise of the lower-level oracle; defaults to `noise`.
    pub noise_g: Option<NoiseModel>,
    pub arms: Vec<ArmSpec>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Metric row every `cadence` outer steps.
    pub cadence: Option<usize>,
    /// Common SFO budget for arms without an explicit `outer_steps`.
    pub sfo_budget: Option<u64>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub init: InitSpec,
    pub out_dir: Option<PathBuf>,
    /// Directory for resolving relative paths; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One concrete configuration of an arm.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub grid_id: usize,
    pub arm: usize,
    pub label: String,
    pub cfg: AlgoConfig,
    /// Grid coordinates as `(name, value)`.
    pub params: Vec<(&'static str, f64)>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read spec {}: {e}", path.display())))?;
        let mut spec = ExperimentSpec::from_toml(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn noise_g(&self) -> &NoiseModel {
        self.noise_g.as_ref().unwrap_or(&self.noise)
    }

    pub fn build_problem(&self) -> Result<Instance> {
        self.problem.build(&self.base_dir)
    }

    /// Stream of run `run` at grid point `grid_id`.
    pub fn run_stream(&self, grid_id: usize, run: usize) -> RngStream {
        RngStream::new(self.seed, mix64(grid_id as u64, run as u64))
    }

    /// Initial point of run `run`, shared by every grid point.
    pub fn initial_point(&self, instance: &Instance, run: usize) -> Result<(Vector, Vector)> {
        let (dx, dy) = instance.dims();
        let x0 = match &self.init.x0 {
            Some(v) if v.len() == dx => DVector::from_vec(v.clone()),
            Some(v) => return Err(Error::config(format!("init.x0 has length {}, expected {dx}", v.len()))),
            None => {
                let mut rng = RngStream::new(self.seed, mix64(0x1417, run as u64)).generator();
                NoiseModel::gaussian(self.init.x0_scale)?.sample_with(dx, &mut rng)
            }
        };
        Ok((x0, DVector::zeros(dy)))
    }

    /// Checks everything that can be checked before any run starts and
    /// returns the expanded grid.
    pub fn validate(&self, instance: &Instance) -> Result<Vec<GridPoint>> {
        if self.arms.is_empty() {
            return Err(Error::config("spec has no arms"));
        }
        if self.n_runs == 0 {
            return Err(Error::config("n_runs must be positive"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be positive"));
        }
        if !(self.init.x0_scale >= 0.0) {
            return Err(Error::config("init.x0_scale must be nonnegative"));
        }
        for arm in &self.arms {
            if arm.algo.is_bilevel() != instance.is_bilevel() {
                return Err(Error::config(format!(
                    "arm {} does not match the {} problem",
                    arm.label(),
                    if instance.is_bilevel() { "bilevel" } else { "minimax" }
                )));
            }
        }
        self.initial_point(instance, 0)?;
        let grid = self.expand()?;
        let min_lambda = instance.bilevel_constants().and_then(|c| c.min_lambda());
        for p in &grid {
            p.cfg.validate()?;
            if let (Some(lambda), Some(min)) = (p.cfg.lambda, min_lambda) {
                if lambda < min {
                    return Err(Error::config(format!(
                        "arm {} grid {}: lambda = {lambda} is below 2 L_f / mu = {min}",
                        p.label, p.grid_id
                    )));
                }
            }
        }
        Ok(grid)
    }

    /// Cartesian product of each arm's listed values, in listing order.
    pub fn expand(&self) -> Result<Vec<GridPoint>> {
        let mut out = Vec::new();
        for (ai, arm) in self.arms.iter().enumerate() {
            let label = arm.label();
            let opt = |v: &Option<OneOrMany<f64>>| v.as_ref().map(|g| g.values());
            let axes: Vec<(&'static str, Vec<f64>)> = [
                ("eta_x", Some(arm.eta_x.values())),
                ("eta_y", Some(arm.eta_y.values())),
                ("eta_z", opt(&arm.eta_z)),
                ("tau_y", opt(&arm.tau_y)),
                ("tau_z", opt(&arm.tau_z)),
                ("tau_x", opt(&arm.tau_x)),
                ("lambda", opt(&arm.lambda)),
            ]
            .into_iter()
            .filter_map(|(n, v)| v.map(|v| (n, v)))
            .collect();
            if let Some((name, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
                return Err(Error::config(format!("arm {label}: empty grid for {name}")));
            }
            let total: usize = axes.iter().map(|(_, v)| v.len()).product();
            for idx in 0..total {
                // last axis varies fastest
                let mut rem = idx;
                let mut params = Vec::with_capacity(axes.len());
                let mut picks = vec![0.0; axes.len()];
                for (i, (_, vals)) in axes.iter().enumerate().rev() {
                    picks[i] = vals[rem % vals.len()];
                    rem /= vals.len();
                }
                for (i, (name, _)) in axes.iter().enumerate() {
                    params.push((*name, picks[i]));
                }
                let grid_id = out.len();
                let cfg = self.point_config(arm, &params)?;
                out.push(GridPoint {
                    grid_id,
                    arm: ai,
                    label: label.clone(),
                    cfg,
                    params,
                });
            }
        }
        Ok(out)
    }

    fn point_config(&self, arm: &ArmSpec, params: &[(&'static str, f64)]) -> Result<AlgoConfig> {
        let get = |name: &str| params.iter().find(|(n, _)| *n == name).map(|(_, v)| *v);
        let eta_x = get("eta_x").expect("always present");
        let eta_y = get("eta_y").expect("always present");
        let tau_y = get("tau_y").unwrap_or(f64::INFINITY);
        let k = arm.inner_steps;
        if k == 0 {
            return Err(Error::config(format!("arm {}: inner_steps must be positive", arm.label())));
        }
        let per_outer = arm.algo.cost_per_outer(k, arm.batch);
        let outer_steps = match (arm.outer_steps, self.sfo_budget) {
            (Some(t), _) => t,
            (None, Some(budget)) => (budget / per_outer) as usize,
            (None, None) => {
                return Err(Error::config(format!(
                    "arm {}: set outer_steps or an experiment-wide sfo_budget",
                    arm.label()
                )))
            }
        };
        let mut cfg = AlgoConfig::new(arm.algo, eta_x, eta_y, outer_steps, k)?;
        cfg.batch = arm.batch;
        cfg.inner_y = InnerSchedule::manual(eta_y, tau_y, k)?;
        if arm.algo.is_bilevel() {
            let eta_z = get("eta_z").unwrap_or(eta_y);
            let tau_z = get("tau_z").unwrap_or(tau_y);
            cfg.inner_z = Some(InnerSchedule::manual(eta_z, tau_z, k)?);
        }
        cfg.tau_x = get("tau_x");
        cfg.lambda = get("lambda");
        cfg.report = arm.report;
        cfg.cadence = self.cadence;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}
