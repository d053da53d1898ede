use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    serde_matrix, serde_vector, standard_normal_matrix, standard_normal_vector, BilevelConstants, BilevelProblem,
    SecondOrder,
};
use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::Vector;

/// Quadratic bilevel instance with a closed-form lower level.
///
/// Lower level `g(x, y) = ½‖y − A x‖²`, so `y*(x) = A x`. Upper level
/// `f(x, y) = ½ wᵀ Q w + bᵀ w` with `w = [x; y]` and `Q` symmetric PSD.
///
/// `f` is not globally Lipschitz in `y`; `C_f` is reported over the ball of
/// radius `radius` in the joint `(x, y)` space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticBilevel {
    #[serde(with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub b: Vector,
    pub radius: f64,
}

impl QuadraticBilevel {
    pub fn new(a: DMatrix<f64>, q: DMatrix<f64>, b: Vector, radius: f64) -> Result<Self> {
        let n = a.nrows() + a.ncols();
        if q.nrows() != n || q.ncols() != n || b.len() != n {
            return Err(Error::config(format!(
                "Q must be {n}x{n} and b of length {n} for A of shape {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::config("Q must be symmetric"));
        }
        let min_eig = q.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * (1.0 + q.amax()) {
            return Err(Error::config(format!("Q must be PSD, smallest eigenvalue {min_eig:.3e}")));
        }
        if !(radius > 0.0) {
            return Err(Error::config("radius must be positive"));
        }
        Ok(QuadraticBilevel { a, q, b, radius })
    }

    /// Random instance: `A` Gaussian scaled by `1/√d_x`, `Q = BBᵀ/n + ½I`.
    pub fn random(seed: u64, dim_x: usize, dim_y: usize) -> Self {
        let mut rng = RngStream::new(seed, 0x9b_a11e).generator();
        let n = dim_x + dim_y;
        let a = standard_normal_matrix(dim_y, dim_x, &mut rng) / (dim_x as f64).sqrt();
        let bmat = standard_normal_matrix(n, n, &mut rng);
        let mut q = &bmat * bmat.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
        q = (&q + q.transpose()) * 0.5;
        let b = standard_normal_vector(n, &mut rng) * 0.5;
        QuadraticBilevel { a, q, b, radius: 10.0 }
    }

    /// `Q = I`, `b = 0`, `A = 0`: upper and lower levels decouple and ∇φ(x) = x.
    pub fn decoupled(dim_x: usize, dim_y: usize) -> Self {
        let n = dim_x + dim_y;
        QuadraticBilevel {
            a: DMatrix::zeros(dim_y, dim_x),
            q: DMatrix::identity(n, n),
            b: DVector::zeros(n),
            radius: 10.0,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: QuadraticBilevel = toml::from_str(text)?;
        QuadraticBilevel::new(raw.a, raw.q, raw.b, raw.radius)
    }

    fn stack(&self, x: &Vector, y: &Vector) -> Vector {
        let mut w = DVector::zeros(x.len() + y.len());
        w.rows_mut(0, x.len()).copy_from(x);
        w.rows_mut(x.len(), y.len()).copy_from(y);
        w
    }

    fn q_rows_times(&self, start: usize, len: usize, w: &Vector) -> Vector {
        self.q.rows(start, len) * w
    }

    /// φ(x) = f(x, A x).
    pub fn phi(&self, x: &Vector) -> f64 {
        self.f(x, &(&self.a * x))
    }

    /// ∇φ(x) = ∇_x f + Aᵀ ∇_y f at (x, A x).
    pub fn phi_grad(&self, x: &Vector) -> Vector {
        let y = &self.a * x;
        self.grad_f_x(x, &y) + self.a.transpose() * self.grad_f_y(x, &y)
    }

    /// ∇²_{yy} of f(x,·) + λ g(x,·).
    pub fn penalty_hessian_yy(&self, lambda: f64) -> DMatrix<f64> {
        let dx = self.a.ncols();
        let dy = self.a.nrows();
        self.q.view((dx, dx), (dy, dy)).into_owned() + DMatrix::identity(dy, dy) * lambda
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim_x(&self) -> usize {
        self.a.ncols()
    }

    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        let w = self.stack(x, y);
        0.5 * w.dot(&(&self.q * &w)) + self.b.dot(&w)
    }

    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * (y - &self.a * x).norm_squared()
    }

    fn grad_f_x(&self, x: &Vector, y: &Vector) -> Vector {
        let w = self.stack(x, y);
        self.q_rows_times(0, x.len(), &w) + self.b.rows(0, x.len())
    }

    fn grad_f_y(&self, x: &Vector, y: &Vector) -> Vector {
        let w = self.stack(x, y);
        self.q_rows_times(x.len(), y.len(), &w) + self.b.rows(x.len(), y.len())
    }

    fn grad_g_x(&self, x: &Vector, y: &Vector) -> Vector {
        -(self.a.transpose() * (y - &self.a * x))
    }

    fn grad_g_y(&self, x: &Vector, y: &Vector) -> Vector {
        y - &self.a * x
    }

    fn constants(&self) -> BilevelConstants {
        let dx = self.dim_x();
        let dy = self.dim_y();
        let l_f = self.q.clone().symmetric_eigenvalues().max();
        let q_y = self.q.rows(dx, dy).into_owned();
        let q_y_norm = q_y.singular_values().max();
        let c_f = q_y_norm * self.radius + self.b.rows(dx, dy).norm();
        let a_norm = if self.a.is_empty() { 0.0 } else { self.a.singular_values().max() };
        BilevelConstants {
            c_f: Some(c_f),
            l_f: Some(l_f),
            // joint Hessian of g is [AᵀA, −Aᵀ; −A, I], whose norm is 1 + ‖A‖²
            l_g: Some(1.0 + a_norm * a_norm),
            rho_g: Some(0.0),
            mu: Some(1.0),
        }
    }

    fn y_star(&self, x: &Vector) -> Option<Vector> {
        Some(&self.a * x)
    }

    fn y_star_lambda(&self, x: &Vector, lambda: f64) -> Option<Vector> {
        let dx = self.dim_x();
        let dy = self.dim_y();
        let h = self.penalty_hessian_yy(lambda);
        let q_yx = self.q.view((dx, 0), (dy, dx));
        let rhs = &self.a * x * lambda - q_yx * x - self.b.rows(dx, dy);
        h.cholesky().map(|ch| ch.solve(&rhs))
    }

    fn second_order_g(&self, _x: &Vector, _y: &Vector) -> Option<SecondOrder> {
        let dy = self.dim_y();
        Some(SecondOrder {
            xy: -self.a.transpose(),
            yy: DMatrix::identity(dy, dy),
        })
    }

    fn hessian_f_yy(&self, _x: &Vector, _y: &Vector) -> Option<DMatrix<f64>> {
        let dx = self.dim_x();
        let dy = self.dim_y();
        Some(self.q.view((dx, dx), (dy, dy)).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{hypergradient, penalty_grad_x, penalty_hypergradient};

    #[test]
    fn decoupled_hypergradient_is_identity() {
        let p = QuadraticBilevel::decoupled(3, 2);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(hypergradient(&p, &x).unwrap(), x);
    }

    #[test]
    fn equal_inner_points_cancel_penalty_term() {
        let p = QuadraticBilevel::random(4, 3, 4);
        let x = DVector::from_vec(vec![0.3, -0.1, 0.7]);
        let y = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.0]);
        let g = penalty_grad_x(&p, &x, &y, &y, 1e6).unwrap();
        assert_eq!(g, p.grad_f_x(&x, &y));
    }

    #[test]
    fn penalty_gradient_matches_closed_form() {
        // For this instance ∇L*_λ(x) = ∇_x f(x, y_λ) + Aᵀ ∇_y f(x, y_λ).
        let p = QuadraticBilevel::random(11, 5, 5);
        let x = DVector::from_fn(5, |i, _| (i as f64 - 2.0) * 0.4);
        for &lambda in &[5.0, 50.0, 1e3] {
            let y = p.y_star_lambda(&x, lambda).unwrap();
            let expected = p.grad_f_x(&x, &y) + p.a.transpose() * p.grad_f_y(&x, &y);
            let got = penalty_hypergradient(&p, &x, lambda).unwrap();
            assert!((got - &expected).norm() <= 1e-12 * (1.0 + lambda) * (1.0 + expected.norm()));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = QuadraticBilevel::random(1, 2, 3);
        let x = DVector::zeros(2);
        let y = DVector::zeros(2);
        let z = DVector::zeros(3);
        assert!(matches!(penalty_grad_x(&p, &x, &y, &z, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn instance_round_trips_through_toml() {
        let p = QuadraticBilevel::random(2, 3, 2);
        let text = p.to_toml().unwrap();
        assert!(text.contains("rows = 2"));
        let back = QuadraticBilevel::from_toml(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn rejects_malformed_instances() {
        let bad = "radius = 1.0\nb = [0.0, 0.0]\n[a]\nrows = 1\ncols = 1\ndata = [1.0]\n[q]\nrows = 2\ncols = 2\ndata = [1.0, 2.0, 0.0, 1.0]\n";
        assert!(QuadraticBilevel::from_toml(bad).is_err());
        let short = "radius = 1.0\nb = [0.0, 0.0]\n[a]\nrows = 1\ncols = 1\ndata = [1.0, 3.0]\n[q]\nrows = 2\ncols = 2\ndata = [1.0, 0.0, 0.0, 1.0]\n";
        assert!(QuadraticBilevel::from_toml(short).is_err());
    }
}
