//! Zero-mean heavy-tailed perturbations and the clipping primitive.
//!
//! Every [`NoiseModel`] carries a declared per-coordinate bound `sigma` on its
//! `p`-th absolute central moment. Vector draws are coordinate-wise i.i.d.; the
//! bound for a `d`-dimensional draw is `sigma * d^(1/p)`, which is valid because
//! `‖v‖₂^p ≤ Σ|v_i|^p` whenever `p ≤ 2`.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::Vector;

/// Generator type behind every [`RngStream`].
pub type StreamRng = ChaCha8Rng;

/// Finalizer of splitmix64, used to derive stream ids.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit mix of two words. Stable across platforms and
/// compiler versions, unlike `std::hash`.
pub fn mix64(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(29) ^ 0x632b_e59b_d9b4_e019)
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Identical pairs reproduce bit-identical sequences. Distinct stream ids select
/// distinct ChaCha streams under the same key, so the sequences never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream for a named role (inner loop, minibatch, ...).
    pub fn derive(&self, role: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: mix64(self.stream_id, role),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    ShiftedPareto,
    StudentT,
}

/// Plain description of a noise law as it appears in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Pareto tail index or Student-t degrees of freedom; ignored for Gaussian.
    #[serde(default)]
    pub shape: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Declared moment order, in (1, 2].
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn default_p() -> f64 {
    2.0
}

/// Validated zero-mean noise law with a certified moment bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseSpec", into = "NoiseSpec")]
pub struct NoiseModel {
    kind: NoiseKind,
    shape: f64,
    scale: f64,
    p: f64,
    /// Per-coordinate bound: E|ξ_i|^p ≤ sigma^p.
    sigma: f64,
    mean_shift: f64,
}

impl TryFrom<NoiseSpec> for NoiseModel {
    type Error = Error;

    fn try_from(spec: NoiseSpec) -> Result<Self> {
        NoiseModel::new(spec.kind, spec.shape, spec.scale, spec.p)
    }
}

impl From<NoiseModel> for NoiseSpec {
    fn from(m: NoiseModel) -> Self {
        NoiseSpec {
            kind: m.kind,
            shape: m.shape,
            scale: m.scale,
            p: m.p,
        }
    }
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, shape: f64, scale: f64, p: f64) -> Result<Self> {
        if !(p > 1.0 && p <= 2.0) {
            return Err(Error::config(format!("moment order p = {p} must lie in (1, 2]")));
        }
        if !scale.is_finite() || scale < 0.0 || (scale == 0.0 && kind != NoiseKind::Gaussian) {
            return Err(Error::config(format!("noise scale {scale} must be positive")));
        }
        let (sigma_p, mean_shift) = match kind {
            NoiseKind::Gaussian => {
                // E|Z|^p = 2^{p/2} Γ((p+1)/2) / √π
                let m = 2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0) / std::f64::consts::PI.sqrt();
                (scale.powf(p) * m, 0.0)
            }
            NoiseKind::ShiftedPareto => {
                let alpha = shape;
                if !(alpha.is_finite() && alpha > p) {
                    return Err(Error::config(format!(
                        "Pareto tail index {alpha} must exceed the moment order p = {p}"
                    )));
                }
                let mean = alpha * scale / (alpha - 1.0);
                // |X − m| ≤ max(X, m) for X, m > 0, so
                // E|X − m|^p ≤ m^p P(X ≤ m) + ∫_m^∞ x^p dF(x).
                let below = mean.powf(p) * (1.0 - (scale / mean).powf(alpha));
                let above = alpha * scale.powf(alpha) * mean.powf(p - alpha) / (alpha - p);
                (below + above, mean)
            }
            NoiseKind::StudentT => {
                let nu = shape;
                if !(nu.is_finite() && nu > p) {
                    return Err(Error::config(format!(
                        "Student-t degrees of freedom {nu} must exceed the moment order p = {p}"
                    )));
                }
                let m = nu.powf(p / 2.0) * gamma((p + 1.0) / 2.0) * gamma((nu - p) / 2.0)
                    / (std::f64::consts::PI.sqrt() * gamma(nu / 2.0));
                (scale.powf(p) * m, 0.0)
            }
        };
        Ok(NoiseModel {
            kind,
            shape,
            scale,
            p,
            sigma: sigma_p.powf(1.0 / p),
            mean_shift,
        })
    }

    /// Deterministic oracle: Gaussian with zero scale.
    pub fn none() -> Self {
        NoiseModel::new(NoiseKind::Gaussian, 0.0, 0.0, 2.0).expect("zero noise is valid")
    }

    pub fn gaussian(scale: f64) -> Result<Self> {
        NoiseModel::new(NoiseKind::Gaussian, 0.0, scale, 2.0)
    }

    pub fn shifted_pareto(alpha: f64, scale: f64, p: f64) -> Result<Self> {
        NoiseModel::new(NoiseKind::ShiftedPareto, alpha, scale, p)
    }

    pub fn student_t(nu: f64, scale: f64, p: f64) -> Result<Self> {
        NoiseModel::new(NoiseKind::StudentT, nu, scale, p)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Per-coordinate moment bound.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Bound for a `dim`-dimensional draw: E‖ξ‖^p ≤ sigma_for_dim(dim)^p.
    pub fn sigma_for_dim(&self, dim: usize) -> f64 {
        self.sigma * (dim as f64).powf(1.0 / self.p)
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                self.scale * z
            }
            NoiseKind::ShiftedPareto => {
                // inverse CDF with u ∈ (0, 1]
                let u = 1.0 - rng.random::<f64>();
                self.scale * u.powf(-1.0 / self.shape) - self.mean_shift
            }
            NoiseKind::StudentT => {
                let t = StudentT::new(self.shape).expect("validated degrees of freedom");
                self.scale * t.sample(rng)
            }
        }
    }

    /// Add one draw to `v` in place. Zero-scale models consume no randomness.
    pub fn perturb<R: Rng + ?Sized>(&self, v: &mut Vector, rng: &mut R) {
        if self.is_zero() {
            return;
        }
        for vi in v.iter_mut() {
            *vi += self.draw(rng);
        }
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vector {
        let mut v = DVector::zeros(dim);
        self.perturb(&mut v, rng);
        v
    }

    /// One draw from the start of `stream`.
    pub fn sample(&self, dim: usize, stream: &RngStream) -> Result<Vector> {
        if dim == 0 {
            return Err(Error::config("noise dimension must be positive"));
        }
        Ok(self.sample_with(dim, &mut stream.generator()))
    }
}

/// Monte-Carlo estimate of E‖ξ‖^p over `n` fresh draws from `stream`.
pub fn empirical_central_moment(
    model: &NoiseModel,
    p: f64,
    dim: usize,
    n: usize,
    stream: &RngStream,
) -> Result<f64> {
    if n < 1000 {
        return Err(Error::config(format!("need at least 1000 draws, got {n}")));
    }
    if dim == 0 {
        return Err(Error::config("noise dimension must be positive"));
    }
    let mut rng = stream.generator();
    let mut v = DVector::zeros(dim);
    let mut acc = 0.0;
    for _ in 0..n {
        v.fill(0.0);
        model.perturb(&mut v, &mut rng);
        acc += v.norm().powf(p);
    }
    Ok(acc / n as f64)
}

/// Scaling applied by `clip` to a vector of norm `norm`.
#[inline]
pub fn clip_factor(norm: f64, tau: f64) -> f64 {
    if norm <= tau {
        1.0
    } else {
        tau / norm
    }
}

/// `min{1, τ/‖v‖}·v`, and `0 ↦ 0`. `tau = +∞` is the identity.
pub fn clip(v: &Vector, tau: f64) -> Result<Vector> {
    check_tau(tau)?;
    let mut out = v.clone();
    clip_in_place(&mut out, tau);
    Ok(out)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("clipping radius must be positive, got {tau}")))
    }
}

/// In-place clip; `tau` must already be validated.
#[inline]
pub fn clip_in_place(v: &mut Vector, tau: f64) {
    let norm = v.norm();
    if norm > tau {
        *v *= tau / norm;
    }
}
