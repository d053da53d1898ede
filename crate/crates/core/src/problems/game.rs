use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{serde_matrix, standard_normal_matrix, standard_normal_vector, MinimaxConstants, MinimaxProblem};
use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::Vector;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 10_000;

/// Spectral norm by power iteration on `MᵀM`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || m.amax() == 0.0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let mut rng = RngStream::new(0x5eed, 0x0b0e).generator();
    let mut v = standard_normal_vector(m.ncols(), &mut rng);
    v.normalize_mut();
    let mut est = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = &gram * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            break;
        }
        v = w / wn;
        if (next - est).abs() <= POWER_TOL * next {
            est = next;
            break;
        }
        est = next;
    }
    est.sqrt()
}

/// `f(x, y) = m1 [‖x‖² + sin(3√(‖x‖²+1))] + xᵀ K y − m2 ‖y‖²`.
///
/// Nonconvex in `x`, `2 m2`-strongly concave in `y`, and `K` is a random
/// symmetric matrix with spectral norm 10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPlayerGame {
    pub m1: f64,
    pub m2: f64,
    #[serde(with = "serde_matrix")]
    pub k: DMatrix<f64>,
}

pub const GAME_DIM: usize = 30;

/// Builds the game with `K = 10 K̃/‖K̃‖`, `K̃ = (M + Mᵀ)/2`, `M` standard normal.
pub fn make_two_player_game(seed: u64, m1: f64, m2: f64) -> Result<TwoPlayerGame> {
    TwoPlayerGame::with_dim(seed, GAME_DIM, m1, m2)
}

impl TwoPlayerGame {
    pub fn with_dim(seed: u64, dim: usize, m1: f64, m2: f64) -> Result<Self> {
        if !(m1 > 0.0 && m2 > 0.0) {
            return Err(Error::config(format!("m1 = {m1} and m2 = {m2} must be positive")));
        }
        if dim == 0 {
            return Err(Error::config("game dimension must be positive"));
        }
        let mut rng = RngStream::new(seed, 0x6a3e).generator();
        let m = standard_normal_matrix(dim, dim, &mut rng);
        let sym = (&m + m.transpose()) * 0.5;
        let k = &sym * (10.0 / spectral_norm(&sym));
        Ok(TwoPlayerGame { m1, m2, k })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    #[inline]
    fn radial(&self, x: &Vector) -> (f64, f64) {
        let sq = x.norm_squared();
        let r = (sq + 1.0).sqrt();
        (sq, r)
    }

    /// Φ(x) = m1[‖x‖² + sin(3√(‖x‖²+1))] + ‖Kᵀx‖²/(4 m2).
    pub fn phi(&self, x: &Vector) -> f64 {
        let (sq, r) = self.radial(x);
        self.m1 * (sq + (3.0 * r).sin()) + (self.k.transpose() * x).norm_squared() / (4.0 * self.m2)
    }

    pub fn phi_grad(&self, x: &Vector) -> Vector {
        let (_, r) = self.radial(x);
        let coef = self.m1 * (2.0 + 3.0 * (3.0 * r).cos() / r);
        x * coef + &self.k * (self.k.transpose() * x) / (2.0 * self.m2)
    }
}

impl MinimaxProblem for TwoPlayerGame {
    fn dim_x(&self) -> usize {
        self.k.nrows()
    }

    fn dim_y(&self) -> usize {
        self.k.ncols()
    }

    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        let (sq, r) = self.radial(x);
        self.m1 * (sq + (3.0 * r).sin()) + x.dot(&(&self.k * y)) - self.m2 * y.norm_squared()
    }

    fn grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        let (_, r) = self.radial(x);
        let coef = self.m1 * (2.0 + 3.0 * (3.0 * r).cos() / r);
        let mut g = &self.k * y;
        g.axpy(coef, x, 1.0);
        g
    }

    fn grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        let mut g = self.k.tr_mul(x);
        g.axpy(-2.0 * self.m2, y, 1.0);
        g
    }

    fn constants(&self) -> MinimaxConstants {
        // ‖∇²_xx f‖ ≤ 17 m1 from the radial term; the coupling block has norm ‖K‖.
        let k_norm = spectral_norm(&self.k);
        MinimaxConstants {
            ell: Some((17.0 * self.m1).max(2.0 * self.m2) + k_norm),
            mu: Some(2.0 * self.m2),
        }
    }

    fn y_star(&self, x: &Vector) -> Option<Vector> {
        Some(self.k.tr_mul(x) / (2.0 * self.m2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::phi_and_grad;
    use nalgebra::DVector;

    #[test]
    fn construction_is_deterministic_and_symmetric() {
        let a = make_two_player_game(17, 1.0, 1.0).unwrap();
        let b = make_two_player_game(17, 1.0, 1.0).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(&a.k - a.k.transpose(), DMatrix::zeros(30, 30));
        let c = make_two_player_game(18, 1.0, 1.0).unwrap();
        assert_ne!(a.k, c.k);
    }

    #[test]
    fn spectral_norm_is_ten() {
        for seed in 0..5 {
            let g = make_two_player_game(seed, 1.0, 1.0).unwrap();
            let svd_norm = g.k.singular_values().max();
            assert!((svd_norm - 10.0).abs() <= 1e-8, "seed {seed}: {svd_norm}");
        }
    }

    #[test]
    fn phi_at_origin() {
        let g = make_two_player_game(3, 1.7, 0.6).unwrap();
        let (phi, grad) = phi_and_grad(&g, &DVector::zeros(30)).unwrap();
        assert!((phi - 1.7 * 3f64.sin()).abs() < 1e-15);
        assert_eq!(grad, DVector::zeros(30));
    }

    #[test]
    fn closed_form_argmax_is_stationary() {
        let g = make_two_player_game(5, 1.0, 1.0).unwrap();
        let mut rng = RngStream::new(1, 1).generator();
        for _ in 0..20 {
            let x = standard_normal_vector(30, &mut rng);
            let y = g.y_star(&x).unwrap();
            assert!(g.grad_y(&x, &y).norm() <= 1e-10);
            assert!((g.phi(&x) - g.f(&x, &y)).abs() <= 1e-10 * (1.0 + g.phi(&x).abs()));
            assert!((g.phi_grad(&x) - g.grad_x(&x, &y)).norm() <= 1e-10 * (1.0 + g.phi_grad(&x).norm()));
        }
    }

    #[test]
    fn rejects_nonpositive_weights() {
        assert!(make_two_player_game(0, 0.0, 1.0).is_err());
        assert!(make_two_player_game(0, 1.0, -1.0).is_err());
    }
}
