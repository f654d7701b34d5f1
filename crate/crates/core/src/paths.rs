//! Conditional Gaussian probability paths.
//!
//! A path is a family `p_t(x | z) = N(x; mu_t(z), k_t I)` indexed by
//! `t in [0, 1]`. Marginalising over the conditioning variable `z` gives a
//! path of densities running from `p0` to `p1`. The conditional time score,
//! its per-dimension decomposition, and the conditional Stein score are all
//! available in closed form and are the regression targets for training.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time clip applied where a conditional path degenerates.
pub const EPS_TIME: f64 = 1e-5;

/// Interpolation schedule `alpha(t)` for the variance-preserving path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `alpha(t) = t`.
    Linear,
    /// `alpha(t) = min(1, exp(-2 (T - t)))`.
    Exponential { horizon: f64 },
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => t.min(1.0),
            NoiseSchedule::Exponential { horizon } => (-2.0 * (horizon - t)).exp().min(1.0),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => {
                if t < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseSchedule::Exponential { horizon } => {
                if t < horizon {
                    2.0 * self.alpha(t)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn alpha_ddot(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => 0.0,
            NoiseSchedule::Exponential { horizon } => {
                if t < horizon {
                    4.0 * self.alpha(t)
                } else {
                    0.0
                }
            }
        }
    }

    /// First time at which `alpha` saturates at one.
    fn saturation_time(&self) -> f64 {
        match *self {
            NoiseSchedule::Linear => 1.0,
            NoiseSchedule::Exponential { horizon } => horizon.min(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PathKind {
    /// Variance preserving: `z = x1`, `mu = alpha x1`, `k = 1 - alpha^2`.
    Vp { schedule: NoiseSchedule },
    /// Brownian bridge between independently coupled endpoints:
    /// `z = (x0, x1)`, `mu = (1-t) x0 + t x1`, `k = t (1-t) sigma^2`.
    Sb { sigma: f64 },
}

/// The conditioning variable of a path sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    /// A data point `x1` (variance-preserving path).
    Target(Vec<f64>),
    /// An endpoint pair drawn from `p0 ⊗ p1` (bridge path).
    Coupled { x0: Vec<f64>, x1: Vec<f64> },
}

/// Anything that can produce i.i.d. draws of a fixed dimension.
pub trait EndpointSampler {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// `N(0, I_D)`.
#[derive(Clone, Copy, Debug)]
pub struct StandardNormalSampler {
    pub dim: usize,
}

impl EndpointSampler for StandardNormalSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        standard_normal_vec(self.dim, rng)
    }
}

pub fn standard_normal_vec(dim: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sources for the two path endpoints. The variance-preserving path only
/// reads `p1`; its `p0` is the standard normal by construction.
#[derive(Clone, Copy)]
pub struct Endpoints<'a> {
    pub p0: &'a dyn EndpointSampler,
    pub p1: &'a dyn EndpointSampler,
}

/// A training tuple `(t, z, x, eps)` with `x = mu_t(z) + sqrt(k_t) eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub z: Conditioning,
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianPath {
    kind: PathKind,
    dim: usize,
}

impl ConditionalGaussianPath {
    pub fn new(kind: PathKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("path dimension must be positive".into()));
        }
        match kind {
            PathKind::Sb { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return Err(Error::InvalidParameter(format!("bridge sigma must be positive, got {sigma}")));
            }
            PathKind::Vp { schedule: NoiseSchedule::Exponential { horizon } } if !(horizon > 0.0) => {
                return Err(Error::InvalidParameter(format!("schedule horizon must be positive, got {horizon}")));
            }
            _ => {}
        }
        Ok(Self { kind, dim })
    }

    pub fn vp(dim: usize, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(PathKind::Vp { schedule }, dim)
    }

    pub fn vp_linear(dim: usize) -> Self {
        Self { kind: PathKind::Vp { schedule: NoiseSchedule::Linear }, dim }
    }

    pub fn sb(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(PathKind::Sb { sigma }, dim)
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Clipped time interval on which the conditional law is non-degenerate.
    ///
    /// The VP path is only clipped where `alpha` reaches one; at `t = 0` its
    /// conditional variance is one. The bridge collapses at both ends.
    pub fn time_domain(&self) -> (f64, f64) {
        match self.kind {
            PathKind::Vp { schedule } => (0.0, schedule.saturation_time() - EPS_TIME),
            PathKind::Sb { .. } => (EPS_TIME, 1.0 - EPS_TIME),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.time_domain();
        if t.is_finite() && t >= lo && t <= hi {
            Ok(())
        } else {
            Err(Error::TimeDomain { t, lo, hi })
        }
    }

    /// Conditional variance `k_t`.
    pub fn variance(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Vp { schedule } => {
                let a = schedule.alpha(t);
                1.0 - a * a
            }
            PathKind::Sb { sigma } => t * (1.0 - t) * sigma * sigma,
        }
    }

    /// `d k_t / dt`.
    pub fn variance_dot(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Vp { schedule } => -2.0 * schedule.alpha(t) * schedule.alpha_dot(t),
            PathKind::Sb { sigma } => (1.0 - 2.0 * t) * sigma * sigma,
        }
    }

    fn checked_variance(&self, t: f64) -> Result<f64> {
        let k = self.variance(t);
        if k > 0.0 && k.is_finite() {
            Ok(k)
        } else {
            Err(Error::DegenerateVariance { t, k })
        }
    }

    fn check_conditioning(&self, z: &Conditioning) -> Result<()> {
        let (ok, len) = match (self.kind, z) {
            (PathKind::Vp { .. }, Conditioning::Target(x1)) => (true, x1.len()),
            (PathKind::Sb { .. }, Conditioning::Coupled { x0, x1 }) => {
                if x0.len() != x1.len() {
                    return Err(Error::DimensionMismatch { expected: x1.len(), got: x0.len() });
                }
                (true, x1.len())
            }
            _ => (false, 0),
        };
        if !ok {
            return Err(Error::Unsupported("conditioning variable does not match the path variant".into()));
        }
        if len != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: len });
        }
        Ok(())
    }

    /// Conditional mean `mu_t(z)`.
    pub fn mean(&self, z: &Conditioning, t: f64) -> Vec<f64> {
        match (self.kind, z) {
            (PathKind::Vp { schedule }, Conditioning::Target(x1)) => {
                let a = schedule.alpha(t);
                x1.iter().map(|v| a * v).collect()
            }
            (PathKind::Sb { .. }, Conditioning::Coupled { x0, x1 }) => {
                x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
            }
            _ => panic!("conditioning variable does not match the path variant"),
        }
    }

    /// `d mu_t(z) / dt`.
    pub fn mean_dot(&self, z: &Conditioning, t: f64) -> Vec<f64> {
        match (self.kind, z) {
            (PathKind::Vp { schedule }, Conditioning::Target(x1)) => {
                let ad = schedule.alpha_dot(t);
                x1.iter().map(|v| ad * v).collect()
            }
            (PathKind::Sb { .. }, Conditioning::Coupled { x0, x1 }) => {
                x0.iter().zip(x1).map(|(a, b)| b - a).collect()
            }
            _ => panic!("conditioning variable does not match the path variant"),
        }
    }

    /// Draws the conditioning variable from the endpoint samplers.
    pub fn sample_conditioning(&self, endpoints: Endpoints<'_>, rng: &mut dyn RngCore) -> Conditioning {
        match self.kind {
            PathKind::Vp { .. } => Conditioning::Target(endpoints.p1.sample(rng)),
            PathKind::Sb { .. } => {
                let x0 = endpoints.p0.sample(rng);
                let x1 = endpoints.p1.sample(rng);
                Conditioning::Coupled { x0, x1 }
            }
        }
    }

    /// Builds the sample `x = mu_t(z) + sqrt(k_t) eps` for a given residual.
    pub fn sample_from_parts(&self, z: Conditioning, t: f64, eps: Vec<f64>) -> Result<PathSample> {
        self.check_time(t)?;
        self.check_conditioning(&z)?;
        if eps.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: eps.len() });
        }
        let sd = self.checked_variance(t)?.sqrt();
        let x = self.mean(&z, t).iter().zip(&eps).map(|(m, e)| m + sd * e).collect();
        Ok(PathSample { t, z, x, eps })
    }

    /// Draws `(z, x, eps)` from `p(z) p_t(x | z)` at a fixed time.
    pub fn sample_path(&self, endpoints: Endpoints<'_>, t: f64, rng: &mut dyn RngCore) -> Result<PathSample> {
        self.check_time(t)?;
        let z = self.sample_conditioning(endpoints, rng);
        let eps = standard_normal_vec(self.dim, rng);
        self.sample_from_parts(z, t, eps)
    }

    /// Standardised residual `(x - mu_t(z)) / sqrt(k_t)`.
    pub fn residual(&self, x: &[f64], z: &Conditioning, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        self.check_conditioning(z)?;
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let sd = self.checked_variance(t)?.sqrt();
        Ok(self.mean(z, t).iter().zip(x).map(|(m, xi)| (xi - m) / sd).collect())
    }

    /// `log p_t(x | z)`, including the normalising constant.
    pub fn cond_log_density(&self, x: &[f64], z: &Conditioning, t: f64) -> Result<f64> {
        let eps = self.residual(x, z, t)?;
        let k = self.variance(t);
        let d = self.dim as f64;
        let sq: f64 = eps.iter().map(|e| e * e).sum();
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI * k).ln() - 0.5 * sq)
    }

    /// `d/dt log p_t(x | z)`.
    pub fn cond_time_score(&self, x: &[f64], z: &Conditioning, t: f64) -> Result<f64> {
        let eps = self.residual(x, z, t)?;
        Ok(self.time_score_from_eps(&eps, z, t))
    }

    /// Per-dimension terms of the conditional time score; they sum to
    /// [`Self::cond_time_score`].
    pub fn cond_time_score_vec(&self, x: &[f64], z: &Conditioning, t: f64) -> Result<Vec<f64>> {
        let eps = self.residual(x, z, t)?;
        Ok(self.time_score_vec_from_eps(&eps, z, t))
    }

    /// `d/dx log p_t(x | z) = -eps / sqrt(k_t)`.
    pub fn cond_stein_score(&self, x: &[f64], z: &Conditioning, t: f64) -> Result<Vec<f64>> {
        let eps = self.residual(x, z, t)?;
        let sd = self.variance(t).sqrt();
        Ok(eps.iter().map(|e| -e / sd).collect())
    }

    /// Conditional time score evaluated from a stored residual.
    pub fn time_score_from_eps(&self, eps: &[f64], z: &Conditioning, t: f64) -> f64 {
        let k = self.variance(t);
        let kd = self.variance_dot(t);
        let sd = k.sqrt();
        let mu_dot = self.mean_dot(z, t);
        let d = self.dim as f64;
        let drift: f64 = mu_dot.iter().zip(eps).map(|(m, e)| m * e).sum();
        let sq: f64 = eps.iter().map(|e| e * e).sum();
        -d * kd / (2.0 * k) + drift / sd + kd / (2.0 * k) * sq
    }

    pub fn time_score_vec_from_eps(&self, eps: &[f64], z: &Conditioning, t: f64) -> Vec<f64> {
        let k = self.variance(t);
        let kd = self.variance_dot(t);
        let sd = k.sqrt();
        let mu_dot = self.mean_dot(z, t);
        let c = kd / (2.0 * k);
        mu_dot.iter().zip(eps).map(|(m, e)| -c + m * e / sd + c * e * e).collect()
    }
}

impl PathSample {
    /// Conditional time score of this sample, using the stored residual.
    pub fn time_score(&self, path: &ConditionalGaussianPath) -> f64 {
        path.time_score_from_eps(&self.eps, &self.z, self.t)
    }

    pub fn time_score_vec(&self, path: &ConditionalGaussianPath) -> Vec<f64> {
        path.time_score_vec_from_eps(&self.eps, &self.z, self.t)
    }
}
