//! Weighting functions `lambda(t)` and the importance-sampled time law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{ConditionalGaussianPath, NoiseSchedule, PathKind, EPS_TIME};

/// Default upper truncation of the importance-sampled time density.
pub const DEFAULT_IS_T1: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    /// `lambda(t) = k_t`, the inverse variance of a conditional Stein score entry.
    SteinNorm,
    /// Inverse per-dimension variance of the conditional time score, with the
    /// data statistic `c = (tr Sigma + |mu|^2) / D`.
    TimeNorm { c: f64 },
    /// Times drawn from `(1 + t^2) / (1 - t^2)^2` on `[0, t1]`, rescaled to
    /// `[0, 1 - eps]`, with a constant per-sample weight.
    ImportanceSampled { t1: f64 },
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::SteinNorm => "stein",
            WeightScheme::TimeNorm { .. } => "time",
            WeightScheme::ImportanceSampled { .. } => "importance",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::TimeNorm { c } if !(c > 0.0 && c.is_finite()) => {
                Err(Error::InvalidParameter(format!("time-normalisation c must be positive, got {c}")))
            }
            WeightScheme::ImportanceSampled { t1 } if !(t1 > 0.0 && t1 < 1.0) => {
                Err(Error::InvalidParameter(format!("importance t1 must lie in (0, 1), got {t1}")))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample loss weight at time `t`.
    ///
    /// For [`WeightScheme::ImportanceSampled`] the sampling density already
    /// carries the time normalisation, so every sample gets weight one.
    pub fn lambda(&self, path: &ConditionalGaussianPath, t: f64) -> f64 {
        match *self {
            WeightScheme::Uniform => 1.0,
            WeightScheme::SteinNorm => lambda_stein(path, t),
            WeightScheme::TimeNorm { c } => lambda_time(path, t, c),
            WeightScheme::ImportanceSampled { .. } => 1.0,
        }
    }

    /// `d lambda / dt`, needed by the integration-by-parts objective.
    pub fn lambda_dot(&self, path: &ConditionalGaussianPath, t: f64) -> Result<f64> {
        match *self {
            WeightScheme::Uniform => Ok(0.0),
            WeightScheme::SteinNorm => Ok(path.variance_dot(t)),
            WeightScheme::TimeNorm { c } => Ok(lambda_dot_time(path, t, c)),
            WeightScheme::ImportanceSampled { .. } => Err(Error::UnsupportedScheme(self.name().into())),
        }
    }
}

/// Stein-score normalisation: `lambda(t) = k_t`.
pub fn lambda_stein(path: &ConditionalGaussianPath, t: f64) -> f64 {
    path.variance(t)
}

/// Per-dimension conditional time-score variance. The deterministic
/// `-D k'/(2k)` term has no variance; the remainder is `a |eps|^2 + b eps^T u`.
pub fn time_score_variance_per_dim(path: &ConditionalGaussianPath, t: f64, c: f64) -> f64 {
    match path.kind() {
        PathKind::Vp { schedule } => {
            let a = schedule.alpha(t);
            let ad = schedule.alpha_dot(t);
            let k = 1.0 - a * a;
            (2.0 * a * a * ad * ad + ad * ad * k * c) / (k * k)
        }
        PathKind::Sb { .. } => {
            let p = 1.0 - 4.0 * t + 4.0 * t * t + 2.0 * c * t - 2.0 * c * t * t;
            p / (2.0 * t * t * (1.0 - t) * (1.0 - t))
        }
    }
}

/// Time-score normalisation: reciprocal of [`time_score_variance_per_dim`].
pub fn lambda_time(path: &ConditionalGaussianPath, t: f64, c: f64) -> f64 {
    match path.kind() {
        PathKind::Vp { schedule } => {
            let a = schedule.alpha(t);
            let ad = schedule.alpha_dot(t);
            let k = 1.0 - a * a;
            k * k / (2.0 * a * a * ad * ad + ad * ad * k * c)
        }
        PathKind::Sb { .. } => {
            let p = 1.0 - 4.0 * t + 4.0 * t * t + 2.0 * c * t - 2.0 * c * t * t;
            2.0 * t * t * (1.0 - t) * (1.0 - t) / p
        }
    }
}

/// Analytic `d/dt` of [`lambda_time`].
pub fn lambda_dot_time(path: &ConditionalGaussianPath, t: f64, c: f64) -> f64 {
    match path.kind() {
        PathKind::Vp { schedule } => vp_lambda_time_dot(schedule, t, c),
        PathKind::Sb { .. } => {
            let num = 2.0 * t * t * (1.0 - t) * (1.0 - t);
            let num_d = 4.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
            let p = 1.0 - 4.0 * t + 4.0 * t * t + 2.0 * c * t - 2.0 * c * t * t;
            let p_d = -4.0 + 8.0 * t + 2.0 * c - 4.0 * c * t;
            (num_d * p - num * p_d) / (p * p)
        }
    }
}

fn vp_lambda_time_dot(schedule: NoiseSchedule, t: f64, c: f64) -> f64 {
    let a = schedule.alpha(t);
    let ad = schedule.alpha_dot(t);
    let add = schedule.alpha_ddot(t);
    let k = 1.0 - a * a;
    let num = k * k;
    let num_d = -4.0 * a * ad * k;
    let inner = 2.0 * a * a + k * c;
    let inner_d = 4.0 * a * ad - 2.0 * c * a * ad;
    let den = ad * ad * inner;
    let den_d = 2.0 * ad * add * inner + ad * ad * inner_d;
    (num_d * den - num * den_d) / (den * den)
}

/// Inverse-CDF draw from the density proportional to `(1 + t^2) / (1 - t^2)^2`
/// on `[0, t1]`, rescaled so that `t1` maps to `1 - EPS_TIME`.
pub fn importance_sample_t(t1: f64, u: f64) -> f64 {
    let z = t1 / (1.0 - t1 * t1);
    let yz = u * z;
    let t = 2.0 * yz / ((1.0 + 4.0 * yz * yz).sqrt() + 1.0);
    t * (1.0 - EPS_TIME) / t1
}

/// Analytic CDF of the unscaled importance density on `[0, t1]`.
pub fn importance_cdf(t1: f64, t: f64) -> f64 {
    let z = t1 / (1.0 - t1 * t1);
    (t / (1.0 - t * t)) / z
}
