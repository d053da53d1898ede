use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    serde_matrix, serde_vector, standard_normal_matrix, standard_normal_vector, BilevelConstants, BilevelProblem,
    SecondOrder,
};
use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::Vector;

/// Generator settings for the synthetic learnable-regularization problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegSettings {
    pub seed: u64,
    pub features: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Fraction of labels flipped in both splits.
    pub flip_rate: f64,
    /// Fraction of nonzero coordinates of the planted weight vector.
    pub density: f64,
    /// Box over which x (log-regularizers) is assumed to live.
    pub x_low: f64,
    pub x_high: f64,
    /// Half-width of the y box used when sampling Hessian extremes.
    pub y_box: f64,
}

impl Default for LogRegSettings {
    fn default() -> Self {
        LogRegSettings {
            seed: 0,
            features: 10,
            n_train: 200,
            n_val: 200,
            flip_rate: 0.1,
            density: 0.3,
            x_low: -4.0,
            x_high: 2.0,
            y_box: 5.0,
        }
    }
}

/// Feature-wise regularized logistic regression as a bilevel problem.
///
/// Lower level: mean training logistic loss of `y` plus `yᵀ diag(exp(x)) y`.
/// Upper level: mean validation logistic loss of `y`; it does not depend on `x`.
/// Labels are ±1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnableRegLogReg {
    #[serde(with = "serde_matrix")]
    pub train_features: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub train_labels: Vector,
    #[serde(with = "serde_matrix")]
    pub val_features: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub val_labels: Vector,
    pub constants: BilevelConstants,
}

/// ln(1 + e^{-z}) without overflow.
#[inline]
fn softplus_neg(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logistic_loss(a: &DMatrix<f64>, b: &Vector, y: &Vector) -> f64 {
    let margins = a * y;
    margins.iter().zip(b.iter()).map(|(m, l)| softplus_neg(l * m)).sum::<f64>() / b.len() as f64
}

fn logistic_grad(a: &DMatrix<f64>, b: &Vector, y: &Vector) -> Vector {
    let margins = a * y;
    let weights = DVector::from_iterator(
        b.len(),
        margins.iter().zip(b.iter()).map(|(m, l)| -l * sigmoid(-l * m)),
    );
    a.tr_mul(&weights) / b.len() as f64
}

fn logistic_hessian(a: &DMatrix<f64>, b: &Vector, y: &Vector) -> DMatrix<f64> {
    let margins = a * y;
    let mut scaled = a.clone();
    for (i, (m, l)) in margins.iter().zip(b.iter()).enumerate() {
        let s = sigmoid(l * m);
        scaled.row_mut(i).scale_mut(s * (1.0 - s));
    }
    a.tr_mul(&scaled) / b.len() as f64
}

impl LearnableRegLogReg {
    pub fn generate(settings: &LogRegSettings) -> Result<Self> {
        let s = settings;
        if s.features == 0 || s.features > 50 {
            return Err(Error::config(format!("feature count {} must be in 1..=50", s.features)));
        }
        if s.n_train == 0 || s.n_val == 0 {
            return Err(Error::config("train and validation splits must be non-empty"));
        }
        if !(0.0..0.5).contains(&s.flip_rate) || !(s.density > 0.0 && s.density <= 1.0) {
            return Err(Error::config("flip_rate must be in [0, 0.5) and density in (0, 1]"));
        }
        if !(s.x_low < s.x_high) || !(s.y_box > 0.0) {
            return Err(Error::config("x box must be non-empty and y_box positive"));
        }
        let d = s.features;
        let mut rng = RngStream::new(s.seed, 0x10_6e6).generator();
        let support = ((s.density * d as f64).ceil() as usize).max(1);
        let mut planted = DVector::zeros(d);
        let raw = standard_normal_vector(d, &mut rng);
        for (i, v) in raw.iter().enumerate().take(support) {
            planted[i] = 2.0 * v;
        }
        let mut split = |n: usize| {
            let a = standard_normal_matrix(n, d, &mut rng);
            let scores = &a * &planted;
            let labels = DVector::from_iterator(
                n,
                scores.iter().map(|sc| {
                    let l = if *sc >= 0.0 { 1.0 } else { -1.0 };
                    if rng.random::<f64>() < s.flip_rate {
                        -l
                    } else {
                        l
                    }
                }),
            );
            (a, labels)
        };
        let (train_features, train_labels) = split(s.n_train);
        let (val_features, val_labels) = split(s.n_val);
        let mut prob = LearnableRegLogReg {
            train_features,
            train_labels,
            val_features,
            val_labels,
            constants: BilevelConstants::default(),
        };
        prob.constants = prob.estimate_constants(s);
        Ok(prob)
    }

    fn g_joint_hessian(&self, x: &Vector, y: &Vector) -> DMatrix<f64> {
        let d = x.len();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        let so = self.second_order_g(x, y).expect("always available");
        for i in 0..d {
            h[(i, i)] = x[i].exp() * y[i] * y[i];
        }
        h.view_mut((0, d), (d, d)).copy_from(&so.xy);
        h.view_mut((d, 0), (d, d)).copy_from(&so.xy.transpose());
        h.view_mut((d, d), (d, d)).copy_from(&so.yy);
        h
    }

    /// μ and L_f, C_f are exact bounds; L_g and ρ_g are sampled maxima over the box.
    fn estimate_constants(&self, s: &LogRegSettings) -> BilevelConstants {
        let d = s.features;
        let mu = 2.0 * s.x_low.exp();
        let nv = self.val_labels.len() as f64;
        let l_f = self.val_features.tr_mul(&self.val_features).symmetric_eigenvalues().max() / (4.0 * nv);
        let c_f = self.val_features.row_iter().map(|r| r.norm()).sum::<f64>() / nv;

        let mut rng = RngStream::new(s.seed, 0xc0_457).generator();
        let point = |rng: &mut crate::noise::StreamRng| {
            let x = DVector::from_fn(d, |_, _| rng.random_range(s.x_low..=s.x_high));
            let y = DVector::from_fn(d, |_, _| rng.random_range(-s.y_box..=s.y_box));
            (x, y)
        };
        let mut l_g: f64 = 0.0;
        let mut rho_g: f64 = 0.0;
        for _ in 0..64 {
            let (x1, y1) = point(&mut rng);
            let (x2, y2) = point(&mut rng);
            let h1 = self.g_joint_hessian(&x1, &y1);
            let h2 = self.g_joint_hessian(&x2, &y2);
            let e1 = h1.clone().symmetric_eigenvalues().amax();
            l_g = l_g.max(e1);
            let dist = ((&x1 - &x2).norm_squared() + (&y1 - &y2).norm_squared()).sqrt();
            let diff = (&h1 - &h2).singular_values().max();
            rho_g = rho_g.max(diff / dist);
        }
        BilevelConstants {
            c_f: Some(c_f),
            l_f: Some(l_f),
            l_g: Some(l_g),
            rho_g: Some(rho_g),
            mu: Some(mu),
        }
    }

    pub fn features(&self) -> usize {
        self.train_features.ncols()
    }

    /// Validation loss at the exact lower-level solution.
    pub fn phi(&self, x: &Vector) -> Result<f64> {
        let y = super::lower_solution(self, x)?;
        Ok(self.f(x, &y))
    }
}

impl BilevelProblem for LearnableRegLogReg {
    fn dim_x(&self) -> usize {
        self.features()
    }

    fn dim_y(&self) -> usize {
        self.features()
    }

    fn f(&self, _x: &Vector, y: &Vector) -> f64 {
        logistic_loss(&self.val_features, &self.val_labels, y)
    }

    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        let reg: f64 = x.iter().zip(y.iter()).map(|(xi, yi)| xi.exp() * yi * yi).sum();
        logistic_loss(&self.train_features, &self.train_labels, y) + reg
    }

    fn grad_f_x(&self, x: &Vector, _y: &Vector) -> Vector {
        DVector::zeros(x.len())
    }

    fn grad_f_y(&self, _x: &Vector, y: &Vector) -> Vector {
        logistic_grad(&self.val_features, &self.val_labels, y)
    }

    fn grad_g_x(&self, x: &Vector, y: &Vector) -> Vector {
        x.zip_map(y, |xi, yi| xi.exp() * yi * yi)
    }

    fn grad_g_y(&self, x: &Vector, y: &Vector) -> Vector {
        logistic_grad(&self.train_features, &self.train_labels, y) + x.zip_map(y, |xi, yi| 2.0 * xi.exp() * yi)
    }

    fn constants(&self) -> BilevelConstants {
        self.constants
    }

    fn second_order_g(&self, x: &Vector, y: &Vector) -> Option<SecondOrder> {
        let mut yy = logistic_hessian(&self.train_features, &self.train_labels, y);
        for i in 0..x.len() {
            yy[(i, i)] += 2.0 * x[i].exp();
        }
        let xy = DMatrix::from_diagonal(&x.zip_map(y, |xi, yi| 2.0 * xi.exp() * yi));
        Some(SecondOrder { xy, yy })
    }

    fn hessian_f_yy(&self, _x: &Vector, y: &Vector) -> Option<DMatrix<f64>> {
        Some(logistic_hessian(&self.val_features, &self.val_labels, y))
    }
}
