//! Problem definitions: exact oracles, noisy oracles and analytic ground truth.
//!
//! Stochastic algorithms only ever see the `noisy_*` block oracles. The exact
//! quantities (`hypergradient`, `phi_and_grad`, `y_star`, ...) exist to grade
//! iterates and must be far more accurate than anything the algorithms produce.

mod game;
mod logreg;
mod quadratic;
mod separable;
pub mod solvers;

pub use game::{make_two_player_game, spectral_norm, TwoPlayerGame};
pub use logreg::{LearnableRegLogReg, LogRegSettings};
pub use quadratic::QuadraticBilevel;
pub use separable::SeparableGame;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::Vector;

/// Second-order blocks of the lower-level objective.
#[derive(Clone, Debug)]
pub struct SecondOrder {
    /// ∇²_{xy} g, shape d_x × d_y.
    pub xy: DMatrix<f64>,
    /// ∇²_{yy} g, shape d_y × d_y.
    pub yy: DMatrix<f64>,
}

/// Smoothness and strong-convexity constants. `None` means unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BilevelConstants {
    pub c_f: Option<f64>,
    pub l_f: Option<f64>,
    pub l_g: Option<f64>,
    pub rho_g: Option<f64>,
    pub mu: Option<f64>,
}

impl BilevelConstants {
    /// ℓ = max{C_f, L_f, L_g, ρ_g}.
    pub fn ell(&self) -> Option<f64> {
        Some(self.c_f?.max(self.l_f?).max(self.l_g?).max(self.rho_g?))
    }

    pub fn kappa(&self) -> Option<f64> {
        Some(self.ell()? / self.mu?)
    }

    /// Constant of the O(1/λ) penalty-gradient gap.
    pub fn d1(&self) -> Option<f64> {
        let (c_f, l_f, l_g, rho_g, mu) = (self.c_f?, self.l_f?, self.l_g?, self.rho_g?, self.mu?);
        Some(
            (l_f + rho_g * l_g / mu + c_f * l_g * rho_g / (2.0 * mu * mu) + c_f * rho_g / (2.0 * mu))
                * c_f
                / mu,
        )
    }

    /// Smallest penalty for which the penalty relationships hold.
    pub fn min_lambda(&self) -> Option<f64> {
        Some(2.0 * self.l_f? / self.mu?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinimaxConstants {
    pub ell: Option<f64>,
    pub mu: Option<f64>,
}

impl MinimaxConstants {
    pub fn kappa(&self) -> Option<f64> {
        Some(self.ell? / self.mu?)
    }
}

/// min_x f(x, y*(x)) subject to y*(x) = argmin_y g(x, y), g(x,·) strongly convex.
pub trait BilevelProblem: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    fn f(&self, x: &Vector, y: &Vector) -> f64;
    fn g(&self, x: &Vector, y: &Vector) -> f64;

    fn grad_f_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_f_y(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_g_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_g_y(&self, x: &Vector, y: &Vector) -> Vector;

    fn constants(&self) -> BilevelConstants;

    /// Closed-form lower-level solution, when known.
    fn y_star(&self, _x: &Vector) -> Option<Vector> {
        None
    }

    /// Closed-form minimizer of f(x,·) + λ g(x,·), when known.
    fn y_star_lambda(&self, _x: &Vector, _lambda: f64) -> Option<Vector> {
        None
    }

    fn second_order_g(&self, _x: &Vector, _y: &Vector) -> Option<SecondOrder> {
        None
    }

    /// ∇²_{yy} f, used only by Newton-type metric solves.
    fn hessian_f_yy(&self, _x: &Vector, _y: &Vector) -> Option<DMatrix<f64>> {
        None
    }

    fn noisy_grad_f_x<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_f_x(x, y);
        noise.perturb(&mut v, rng);
        v
    }

    fn noisy_grad_f_y<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_f_y(x, y);
        noise.perturb(&mut v, rng);
        v
    }

    fn noisy_grad_g_x<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_g_x(x, y);
        noise.perturb(&mut v, rng);
        v
    }

    fn noisy_grad_g_y<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_g_y(x, y);
        noise.perturb(&mut v, rng);
        v
    }
}

/// min_x max_y f(x, y), f(x,·) strongly concave.
pub trait MinimaxProblem: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    fn f(&self, x: &Vector, y: &Vector) -> f64;
    fn grad_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_y(&self, x: &Vector, y: &Vector) -> Vector;

    fn constants(&self) -> MinimaxConstants;

    fn y_star(&self, _x: &Vector) -> Option<Vector> {
        None
    }

    fn noisy_grad_x<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_x(x, y);
        noise.perturb(&mut v, rng);
        v
    }

    fn noisy_grad_y<R: Rng + ?Sized>(&self, noise: &NoiseModel, x: &Vector, y: &Vector, rng: &mut R) -> Vector
    where
        Self: Sized,
    {
        let mut v = self.grad_y(x, y);
        noise.perturb(&mut v, rng);
        v
    }
}

fn check_dim(what: &str, v: &Vector, expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::config(format!("{what} has length {}, expected {expected}", v.len())))
    }
}

/// y*(x), from the closed form when available, else a tight inner solve.
pub fn lower_solution<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector) -> Result<Vector> {
    check_dim("x", x, prob.dim_x())?;
    match prob.y_star(x) {
        Some(y) => Ok(y),
        None => solvers::minimize_lower(prob, x, None),
    }
}

/// y*_λ(x) = argmin_y f(x, y) + λ g(x, y).
pub fn penalty_solution<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector, lambda: f64) -> Result<Vector> {
    check_dim("x", x, prob.dim_x())?;
    if !(lambda > 0.0) {
        return Err(Error::config(format!("penalty λ must be positive, got {lambda}")));
    }
    match prob.y_star_lambda(x, lambda) {
        Some(y) => Ok(y),
        None => solvers::minimize_lower(prob, x, Some(lambda)),
    }
}

/// ∇φ(x) = ∇_x f − ∇²_{xy}g [∇²_{yy}g]⁻¹ ∇_y f, all at (x, y*(x)).
pub fn hypergradient<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector) -> Result<Vector> {
    let y = lower_solution(prob, x)?;
    let so = prob
        .second_order_g(x, &y)
        .ok_or_else(|| Error::config("hypergradient needs second-order information of g"))?;
    let rhs = prob.grad_f_y(x, &y);
    let w = solve_spd(&so.yy, &rhs)?;
    Ok(prob.grad_f_x(x, &y) - &so.xy * w)
}

/// Cholesky solve with a condition report on failure.
pub(crate) fn solve_spd(h: &DMatrix<f64>, rhs: &Vector) -> Result<Vector> {
    match h.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => {
            let eig = h.clone().symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Err(Error::numerical(format!(
                "lower-level Hessian is not positive definite (eigenvalues in [{min:.3e}, {max:.3e}])"
            )))
        }
    }
}

/// ∇_x f(x, y) + λ(∇_x g(x, y) − ∇_x g(x, z)).
///
/// At y = y*_λ(x), z = y*(x) this is ∇L*_λ(x).
pub fn penalty_grad_x<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
    z: &Vector,
    lambda: f64,
) -> Result<Vector> {
    check_dim("x", x, prob.dim_x())?;
    check_dim("y", y, prob.dim_y())?;
    check_dim("z", z, prob.dim_y())?;
    if !(lambda > 0.0) {
        return Err(Error::config(format!("penalty λ must be positive, got {lambda}")));
    }
    let diff = prob.grad_g_x(x, y) - prob.grad_g_x(x, z);
    Ok(prob.grad_f_x(x, y) + diff * lambda)
}

/// ∇L*_λ(x) evaluated at the exact inner solutions.
pub fn penalty_hypergradient<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector, lambda: f64) -> Result<Vector> {
    let y = penalty_solution(prob, x, lambda)?;
    let z = lower_solution(prob, x)?;
    penalty_grad_x(prob, x, &y, &z, lambda)
}

/// y*(x) = argmax_y f(x, y).
pub fn maximizer<P: MinimaxProblem + ?Sized>(prob: &P, x: &Vector) -> Result<Vector> {
    check_dim("x", x, prob.dim_x())?;
    match prob.y_star(x) {
        Some(y) => Ok(y),
        None => solvers::maximize_inner(prob, x),
    }
}

/// (Φ(x), ∇Φ(x)) with Φ(x) = max_y f(x, y) and ∇Φ(x) = ∇_x f(x, y*(x)).
pub fn phi_and_grad<P: MinimaxProblem + ?Sized>(prob: &P, x: &Vector) -> Result<(f64, Vector)> {
    let y = maximizer(prob, x)?;
    Ok((prob.f(x, &y), prob.grad_x(x, &y)))
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    // row-major fill so that the draw order matches the serialized layout
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    use rand_distr::{Distribution, StandardNormal};
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// Serde helper: a matrix as `{ rows, cols, data }` with row-major `data`.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Flat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Flat {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let flat = Flat::deserialize(d)?;
        if flat.data.len() != flat.rows * flat.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix declares shape {}x{} but has {} entries",
                flat.rows,
                flat.cols,
                flat.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(flat.rows, flat.cols, &flat.data))
    }
}

/// Serde helper for vectors as plain arrays.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
