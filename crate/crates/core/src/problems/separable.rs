use serde::{Deserialize, Serialize};

use super::{serde_vector, MinimaxConstants, MinimaxProblem};
use crate::Vector;

/// `f(x, y) = Σ ln(1 + x_i²) − (μ/2)‖y − c‖²`.
///
/// The two players do not interact, so Φ(x) = Σ ln(1 + x_i²) and the ascent
/// on `y` never depends on `x`. No closed-form maximizer is exposed, so metric
/// oracles go through the generic inner maximization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparableGame {
    pub mu: f64,
    #[serde(with = "serde_vector")]
    pub center: Vector,
    pub dim_x: usize,
}

impl SeparableGame {
    pub fn new(dim_x: usize, center: Vector, mu: f64) -> Self {
        SeparableGame { mu, center, dim_x }
    }

    pub fn upper(&self, x: &Vector) -> f64 {
        x.iter().map(|v| (1.0 + v * v).ln()).sum()
    }

    pub fn upper_grad(&self, x: &Vector) -> Vector {
        x.map(|v| 2.0 * v / (1.0 + v * v))
    }
}

impl MinimaxProblem for SeparableGame {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_y(&self) -> usize {
        self.center.len()
    }

    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        self.upper(x) - 0.5 * self.mu * (y - &self.center).norm_squared()
    }

    fn grad_x(&self, x: &Vector, _y: &Vector) -> Vector {
        self.upper_grad(x)
    }

    fn grad_y(&self, _x: &Vector, y: &Vector) -> Vector {
        (&self.center - y) * self.mu
    }

    fn constants(&self) -> MinimaxConstants {
        MinimaxConstants {
            ell: Some(2.0f64.max(self.mu)),
            mu: Some(self.mu),
        }
    }
}
