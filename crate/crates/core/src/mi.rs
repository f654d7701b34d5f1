//! Mutual information between the halves of a block-correlated Gaussian.
//!
//! The path is `p_t(x | z) = N(t z, (1 - t^2) I)` from `N(0, I)` to
//! `p1 = N(0, Sigma)`. The model replaces `Sigma` by `I + S` for a learnable
//! symmetric `S`, so its marginal is `N(0, A)` with `A = I + t^2 S` and both
//! its scalar and per-entry time scores are available in closed form.
//!
//! All batch quantities are computed in the eigenbasis `S = V diag(s) V^T`,
//! which is shared by `A^-1` and `(I + S) A^-1` at every `t`. With
//! `P = A^-1` the scalar score is
//!
//! ```text
//! s(x, t) = (tr P + x^T P x - x^T P^2 x - D) / t
//! ```
//!
//! and parameter gradients are sums of `P^m` and outer products of `P^m x`.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{sample_matrix, sample_time, Objective, TSM_LAMBDA_DOT_COEFF};
use crate::nn::OptimState;
use crate::oracle::{Covariance, GaussianSpec};
use crate::paths::{ConditionalGaussianPath, Endpoints, StandardNormalSampler};
use crate::ratio::{log_ratio_adaptive_batch, TimeScore, DEFAULT_ATOL, DEFAULT_RTOL};
use crate::weighting::WeightScheme;

/// Largest scratch matrix, in entries, used by the vectorised gradient.
const DIAG_CHUNK_ENTRIES: usize = 1 << 22;

/// Smallest admissible eigenvalue of `I + t^2 S`.
pub const MIN_CONDITION: f64 = 1e-8;

/// Covariance with 2x2 blocks `[[1, rho], [rho, 1]]` on the diagonal.
pub fn block_covariance(dim: usize, rho: f64) -> Result<GaussianSpec> {
    if dim % 2 != 0 {
        return Err(Error::InvalidParameter(format!("dimension {dim} must be even")));
    }
    let mut c = vec![0.0; dim * dim];
    for b in 0..dim / 2 {
        let (i, j) = (2 * b, 2 * b + 1);
        c[i * dim + i] = 1.0;
        c[j * dim + j] = 1.0;
        c[i * dim + j] = rho;
        c[j * dim + i] = rho;
    }
    GaussianSpec::new(vec![0.0; dim], Covariance::Full(c))
}

/// `-1/2 log det Sigma` for [`block_covariance`].
pub fn true_mi(dim: usize, rho: f64) -> f64 {
    (dim / 2) as f64 * (-0.5 * (1.0 - rho * rho).ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiModel {
    s: Array2<f64>,
}

/// Eigendecomposition of `S` and the batch in its coordinates.
struct Spectral {
    v: Array2<f64>,
    s: Array1<f64>,
}

struct BatchEval {
    ts: Vec<f64>,
    /// `V^T x` per row.
    y: Array2<f64>,
    /// `1 / (1 + t^2 s_k)` per row.
    r: Array2<f64>,
}

impl MiModel {
    pub fn zeros(dim: usize) -> Self {
        Self { s: Array2::zeros((dim, dim)) }
    }

    pub fn from_matrix(s: Array2<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(Error::DimensionMismatch { expected: s.nrows(), got: s.ncols() });
        }
        let asym = (&s - &s.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if asym > 1e-12 * (1.0 + s.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return Err(Error::InvalidParameter("S must be symmetric".into()));
        }
        Ok(Self { s })
    }

    /// The model whose covariance is exactly `sigma`.
    pub fn exact(sigma: &GaussianSpec) -> Self {
        let c = sigma.cov_matrix();
        let d = sigma.dim();
        Self { s: Array2::from_shape_fn((d, d), |(i, j)| c[(i, j)] - if i == j { 1.0 } else { 0.0 }) }
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.s.as_slice_mut().unwrap()
    }

    fn spectral(&self) -> Spectral {
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |i, j| self.s[[i, j]]);
        let eig = SymmetricEigen::new(m);
        Spectral {
            v: Array2::from_shape_fn((d, d), |(i, k)| eig.eigenvectors[(i, k)]),
            s: Array1::from_iter(eig.eigenvalues.iter().cloned()),
        }
    }

    fn eval(sp: &Spectral, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<BatchEval> {
        let y = xs.dot(&sp.v);
        let mut r = Array2::zeros(y.raw_dim());
        for (n, &t) in ts.iter().enumerate() {
            for (k, &sk) in sp.s.iter().enumerate() {
                let a = 1.0 + t * t * sk;
                if a <= MIN_CONDITION {
                    return Err(Error::IllConditioned { t, min_eig: a });
                }
                r[[n, k]] = 1.0 / a;
            }
        }
        Ok(BatchEval { ts: ts.to_vec(), y, r })
    }

    fn check(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<()> {
        if xs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: xs.ncols() });
        }
        if ts.len() != xs.nrows() {
            return Err(Error::DimensionMismatch { expected: xs.nrows(), got: ts.len() });
        }
        Ok(())
    }

    fn scalar_values(sp: &Spectral, ev: &BatchEval) -> Vec<f64> {
        ev.ts
            .iter()
            .enumerate()
            .map(|(n, &t)| {
                (0..sp.s.len())
                    .map(|k| {
                        let (sk, rk, yk) = (sp.s[k], ev.r[[n, k]], ev.y[[n, k]]);
                        t * sk * rk * (rk * yk * yk - 1.0)
                    })
                    .sum()
            })
            .collect()
    }

    fn scalar_dt_values(sp: &Spectral, ev: &BatchEval) -> Vec<f64> {
        ev.ts
            .iter()
            .enumerate()
            .map(|(n, &t)| {
                (0..sp.s.len())
                    .map(|k| {
                        let (sk, rk, yk) = (sp.s[k], ev.r[[n, k]], ev.y[[n, k]]);
                        let t2 = t * t;
                        -(sk * rk - 2.0 * t2 * sk * sk * rk * rk) + yk * yk * sk * rk * rk * (1.0 - 4.0 * t2 * sk * rk)
                    })
                    .sum()
            })
            .collect()
    }

    /// Posterior mean and diagonal of the posterior covariance of `z | x`.
    fn posterior(sp: &Spectral, ev: &BatchEval) -> (Array2<f64>, Array2<f64>) {
        let mut gy = Array2::zeros(ev.y.raw_dim());
        let mut g = Array2::zeros(ev.y.raw_dim());
        for n in 0..ev.ts.len() {
            for k in 0..sp.s.len() {
                let gk = (1.0 + sp.s[k]) * ev.r[[n, k]];
                g[[n, k]] = gk;
                gy[[n, k]] = gk * ev.y[[n, k]];
            }
        }
        let mut mu = gy.dot(&sp.v.t());
        let v2 = sp.v.mapv(|a| a * a);
        let mut sd = g.dot(&v2.t());
        for (n, &t) in ev.ts.iter().enumerate() {
            mu.row_mut(n).mapv_inplace(|a| a * t);
            sd.row_mut(n).mapv_inplace(|a| a * (1.0 - t * t));
        }
        (mu, sd)
    }

    fn vec_values(xs: ArrayView2<'_, f64>, ts: &[f64], mu: &Array2<f64>, sd: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(mu.raw_dim());
        for (n, &t) in ts.iter().enumerate() {
            let q = 1.0 - t * t;
            let den = q * q;
            for i in 0..mu.ncols() {
                let (m, x) = (mu[[n, i]], xs[[n, i]]);
                out[[n, i]] = (t * q - t * (m * m + sd[[n, i]]) - t * x * x + (t * t + 1.0) * x * m) / den;
            }
        }
        out
    }

    /// Scalar model time score `d/dt log N(x; 0, I + t^2 S)` for each row.
    pub fn time_score_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Vec<f64>> {
        self.check(xs, ts)?;
        let sp = self.spectral();
        let ev = Self::eval(&sp, xs, ts)?;
        Ok(Self::scalar_values(&sp, &ev))
    }

    /// `d/dt` of [`Self::time_score_batch`].
    pub fn time_score_dt_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Vec<f64>> {
        self.check(xs, ts)?;
        let sp = self.spectral();
        let ev = Self::eval(&sp, xs, ts)?;
        Ok(Self::scalar_dt_values(&sp, &ev))
    }

    /// Per-entry posterior expectation of the conditional time score.
    pub fn time_score_vec_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Array2<f64>> {
        self.check(xs, ts)?;
        let sp = self.spectral();
        let ev = Self::eval(&sp, xs, ts)?;
        let (mu, sd) = Self::posterior(&sp, &ev);
        Ok(Self::vec_values(xs, ts, &mu, &sd))
    }

    pub fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::DimensionMismatch { expected: self.dim(), got: x.len() })?;
        Ok(self.time_score_batch(xs, &[t])?[0])
    }

    /// Frozen view for repeated evaluation at many times.
    pub fn score_fn(&self) -> MiScore {
        let sp = self.spectral();
        MiScore { v: sp.v, s: sp.s }
    }
}

/// A fixed model with its eigendecomposition cached.
pub struct MiScore {
    v: Array2<f64>,
    s: Array1<f64>,
}

impl TimeScore for MiScore {
    fn dim(&self) -> usize {
        self.s.len()
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::DimensionMismatch { expected: self.s.len(), got: x.len() })?;
        Ok(self.time_score_batch(xs, t)?[0])
    }

    fn time_score_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Vec<f64>> {
        let y = xs.dot(&self.v);
        let mut out = Vec::with_capacity(xs.nrows());
        let mut r = Vec::with_capacity(self.s.len());
        for &sk in self.s.iter() {
            let a = 1.0 + t * t * sk;
            if a <= MIN_CONDITION {
                return Err(Error::IllConditioned { t, min_eig: a });
            }
            r.push(1.0 / a);
        }
        for row in y.rows() {
            out.push(row.iter().zip(self.s.iter()).zip(&r).map(|((yk, sk), rk)| t * sk * rk * (rk * yk * yk - 1.0)).sum());
        }
        Ok(out)
    }
}

/// Accumulates `dL/dS` in the eigenbasis as `diag(d) + sum_n a_n b_n^T`.
struct EigenGrad {
    diag: Array1<f64>,
    outer: Array2<f64>,
}

impl EigenGrad {
    fn new(d: usize) -> Self {
        Self { diag: Array1::zeros(d), outer: Array2::zeros((d, d)) }
    }

    /// Adds `sum_n c_n diag(r_n^m)`.
    fn add_diag_power(&mut self, c: &[f64], r: &Array2<f64>, m: i32) {
        for (n, &cn) in c.iter().enumerate() {
            if cn == 0.0 {
                continue;
            }
            for k in 0..self.diag.len() {
                self.diag[k] += cn * r[[n, k]].powi(m);
            }
        }
    }

    /// Adds `sum_n c_n a_n b_n^T` for row-stacked `a` and `b`.
    fn add_outer(&mut self, c: &[f64], a: &Array2<f64>, b: &Array2<f64>) {
        let mut ac = a.clone();
        for (mut row, &cn) in ac.rows_mut().into_iter().zip(c) {
            row.mapv_inplace(|v| v * cn);
        }
        self.outer += &ac.t().dot(b);
    }

    /// `V (diag + outer) V^T`, symmetrised.
    fn finish(mut self, v: &Array2<f64>) -> Array2<f64> {
        for k in 0..self.diag.len() {
            self.outer[[k, k]] += self.diag[k];
        }
        let g = v.dot(&self.outer).dot(&v.t());
        (&g + &g.t()) * 0.5
    }
}

/// Rows `r^m * y` for the vectors `P^m x` in eigen coordinates.
fn powers(ev: &BatchEval, m: i32) -> Array2<f64> {
    let mut out = ev.y.clone();
    Zip::from(&mut out).and(&ev.r).for_each(|o, &r| *o *= r.powi(m));
    out
}

/// The conditional regression data for one minibatch.
#[derive(Clone, Debug)]
pub struct MiBatch {
    pub xs: Array2<f64>,
    pub ts: Vec<f64>,
    pub targets: Vec<f64>,
    pub targets_vec: Array2<f64>,
    pub weights: Vec<f64>,
    pub weight_dots: Vec<f64>,
}

impl MiBatch {
    pub fn draw(path: &ConditionalGaussianPath, p1: &GaussianSpec, scheme: &WeightScheme, n: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let d = path.dim();
        let p0 = StandardNormalSampler { dim: d };
        let ends = Endpoints { p0: &p0, p1 };
        let mut xs = Array2::zeros((n, d));
        let mut tv = Array2::zeros((n, d));
        let mut ts = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut weight_dots = Vec::with_capacity(n);
        for i in 0..n {
            let t = sample_time(path, scheme, rng);
            let s = path.sample_path(ends, t, rng)?;
            let v = s.time_score_vec(path);
            targets.push(s.time_score(path));
            xs.row_mut(i).assign(&Array1::from(s.x));
            tv.row_mut(i).assign(&Array1::from(v));
            ts.push(t);
            weights.push(scheme.lambda(path, t));
            weight_dots.push(scheme.lambda_dot(path, t).unwrap_or(f64::NAN));
        }
        Ok(Self { xs, ts, targets, targets_vec: tv, weights, weight_dots })
    }
}

/// Loss value and gradient over `S`.
#[derive(Clone, Debug)]
pub struct MiLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Vectorised conditional objective `(1/B) sum lambda |T - s_vec|^2`.
pub fn mi_loss_ctsm_v(model: &MiModel, batch: &MiBatch) -> Result<MiLoss> {
    model.check(batch.xs.view(), &batch.ts)?;
    let b = batch.ts.len() as f64;
    let d = model.dim();
    let sp = model.spectral();
    let ev = MiModel::eval(&sp, batch.xs.view(), &batch.ts)?;
    let (mu, sd) = MiModel::posterior(&sp, &ev);
    let pred = MiModel::vec_values(batch.xs.view(), &batch.ts, &mu, &sd);

    let mut loss = 0.0;
    let mut u = Array2::zeros(pred.raw_dim());
    let mut w = Array2::zeros(pred.raw_dim());
    for (n, &t) in batch.ts.iter().enumerate() {
        let q = 1.0 - t * t;
        let den = q * q;
        let lam = batch.weights[n];
        for i in 0..d {
            let res = batch.targets_vec[[n, i]] - pred[[n, i]];
            loss += lam * res * res;
            let delta = -2.0 * lam * res / b;
            u[[n, i]] = delta * (-2.0 * t * mu[[n, i]] + (1.0 + t * t) * batch.xs[[n, i]]) / den;
            w[[n, i]] = -delta * t / den;
        }
    }

    // dL = sum_n (1 - t^2) <P G_n P, dS>, G_n = t u x^T + (1 - t^2) diag(w)
    let mut acc = EigenGrad::new(d);
    let mut ru = u.dot(&sp.v);
    Zip::from(&mut ru).and(&ev.r).for_each(|a, &r| *a *= r);
    let ry = powers(&ev, 1);
    let c1: Vec<f64> = batch.ts.iter().map(|&t| (1.0 - t * t) * t).collect();
    acc.add_outer(&c1, &ru, &ry);

    // diagonal part: sum_i V_ik V_il sum_n (1 - t^2)^2 r_nk r_nl w_ni,
    // accumulated over row chunks to bound memory
    let bn = batch.ts.len();
    let chunk = (DIAG_CHUNK_ENTRIES / (d * d)).clamp(1, bn);
    let mut tmat = Array2::<f64>::zeros((d, d * d));
    let mut start = 0;
    while start < bn {
        let end = (start + chunk).min(bn);
        let mut r2 = Array2::zeros((end - start, d * d));
        for n in start..end {
            let t = batch.ts[n];
            let c = (1.0 - t * t) * (1.0 - t * t);
            let rn = ev.r.row(n);
            let mut row = r2.row_mut(n - start);
            for k in 0..d {
                let ck = c * rn[k];
                for l in 0..d {
                    row[k * d + l] = ck * rn[l];
                }
            }
        }
        tmat += &w.slice(ndarray::s![start..end, ..]).t().dot(&r2);
        start = end;
    }
    for k in 0..d {
        for l in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += sp.v[[i, k]] * sp.v[[i, l]] * tmat[[i, k * d + l]];
            }
            acc.outer[[k, l]] += s;
        }
    }
    Ok(MiLoss { loss: loss / b, grad: acc.finish(&sp.v) })
}

/// Scalar conditional objective `(1/B) sum lambda (T - s)^2`.
pub fn mi_loss_ctsm(model: &MiModel, batch: &MiBatch) -> Result<MiLoss> {
    model.check(batch.xs.view(), &batch.ts)?;
    let b = batch.ts.len() as f64;
    let sp = model.spectral();
    let ev = MiModel::eval(&sp, batch.xs.view(), &batch.ts)?;
    let s = MiModel::scalar_values(&sp, &ev);
    let mut loss = 0.0;
    let mut fs = Vec::with_capacity(s.len());
    for n in 0..s.len() {
        let res = batch.targets[n] - s[n];
        loss += batch.weights[n] * res * res;
        fs.push(-2.0 * batch.weights[n] * res / b);
    }
    let fd = vec![0.0; s.len()];
    let grad = spectral_grad(&sp, &ev, &fs, &fd);
    Ok(MiLoss { loss: loss / b, grad })
}

/// `dL/dS` for a loss whose per-sample partials are `f_s = dL/ds` and
/// `f_sd = dL/d(ds/dt)`.
fn spectral_grad(sp: &Spectral, ev: &BatchEval, fs: &[f64], fsd: &[f64]) -> Array2<f64> {
    let d = sp.s.len();
    let mut acc = EigenGrad::new(d);
    let a1 = powers(ev, 1);
    let a2 = powers(ev, 2);
    let a3 = powers(ev, 3);
    let c_1: Vec<f64> = ev.ts.iter().zip(fs).zip(fsd).map(|((t, f), g)| -t * f + 3.0 * g).collect();
    let c_p3: Vec<f64> = fsd.iter().map(|g| -4.0 * g).collect();
    let c_12: Vec<f64> = ev.ts.iter().zip(fs).zip(fsd).map(|((t, f), g)| t * f - 7.0 * g).collect();
    let c_3: Vec<f64> = fsd.iter().map(|g| 4.0 * g).collect();
    acc.add_diag_power(&c_1, &ev.r, 2);
    acc.add_diag_power(&c_p3, &ev.r, 3);
    acc.add_outer(&c_1, &a1, &a1);
    acc.add_outer(&c_12, &a1, &a2);
    acc.add_outer(&c_12, &a2, &a1);
    if fsd.iter().any(|g| *g != 0.0) {
        acc.add_outer(&c_3, &a1, &a3);
        acc.add_outer(&c_3, &a3, &a1);
        acc.add_outer(&c_3, &a2, &a2);
    }
    acc.finish(&sp.v)
}

/// Integration-by-parts objective for the closed-form model; see
/// [`crate::losses::loss_tsm_with_coeff`] for the form.
pub fn mi_loss_tsm(
    model: &MiModel,
    path: &ConditionalGaussianPath,
    batch: &MiBatch,
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
    scheme: &WeightScheme,
    lambda_dot_coeff: f64,
) -> Result<MiLoss> {
    model.check(batch.xs.view(), &batch.ts)?;
    if batch.weight_dots.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnsupportedScheme(scheme.name().into()));
    }
    let b = batch.ts.len() as f64;
    let sp = model.spectral();
    let ev = MiModel::eval(&sp, batch.xs.view(), &batch.ts)?;
    let s = MiModel::scalar_values(&sp, &ev);
    let sd = MiModel::scalar_dt_values(&sp, &ev);
    let mut loss = 0.0;
    let mut fs = Vec::with_capacity(s.len());
    let mut fsd = Vec::with_capacity(s.len());
    for n in 0..s.len() {
        let (lam, lamd) = (batch.weights[n], batch.weight_dots[n]);
        loss += 2.0 * lam * sd[n] + lambda_dot_coeff * lamd * s[n] + lam * s[n] * s[n];
        fs.push((lambda_dot_coeff * lamd + 2.0 * lam * s[n]) / b);
        fsd.push(2.0 * lam / b);
    }
    loss /= b;
    let mut grad = spectral_grad(&sp, &ev, &fs, &fsd);

    let (lo, hi) = path.time_domain();
    let span = hi - lo;
    for (xb, t, sign) in [(x0, lo, 1.0), (x1, hi, -1.0)] {
        let m = xb.nrows();
        if m == 0 {
            continue;
        }
        let coeff = sign * 2.0 * scheme.lambda(path, t) / span;
        let ts = vec![t; m];
        let evb = MiModel::eval(&sp, xb, &ts)?;
        let vals = MiModel::scalar_values(&sp, &evb);
        loss += coeff * vals.iter().sum::<f64>() / m as f64;
        let cs = vec![coeff / m as f64; m];
        grad += &spectral_grad(&sp, &evb, &cs, &vec![0.0; m]);
    }
    Ok(MiLoss { loss, grad })
}

/// Mean over `xs` of the adaptively integrated model log-ratio.
pub fn estimate_mi(model: &MiModel, xs: ArrayView2<'_, f64>) -> Result<f64> {
    let score = model.score_fn();
    let (vals, _) = log_ratio_adaptive_batch(&score, xs, DEFAULT_RTOL, DEFAULT_ATOL)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiTraceRow {
    pub step: usize,
    pub loss: f64,
    pub mi_estimate: f64,
    pub abs_error: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct MiTrainResult {
    pub model: MiModel,
    pub trace: Vec<MiTraceRow>,
    /// Steps skipped because `I + t^2 S` was ill-conditioned in the batch.
    pub skipped: usize,
    pub diverged: Option<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub n_eval: usize,
    pub lambda_dot_coeff: f64,
}

impl Default for MiTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-2, batch_size: 512, n_iters: 20_001, eval_every: 2000, seed: 0, n_eval: 10_000, lambda_dot_coeff: TSM_LAMBDA_DOT_COEFF }
    }
}

/// Trains `S` from zero with Adam. The MI estimate is recorded every
/// `eval_every` steps on a fixed set of `p1` draws.
pub fn train_mi(p1: &GaussianSpec, objective: Objective, scheme: WeightScheme, config: &MiTrainConfig, true_value: f64) -> Result<MiTrainResult> {
    let d = p1.dim();
    let path = ConditionalGaussianPath::vp_linear(d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_xs = sample_matrix(p1, config.n_eval, &mut rng);
    let mut model = MiModel::zeros(d);
    let mut opt = OptimState::new(d * d, config.lr);
    let p0 = StandardNormalSampler { dim: d };
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut skipped = 0;
    let mut diverged = None;
    let mut since = (0.0, 0usize);
    let every = config.eval_every.max(1);
    for step in 1..=config.n_iters {
        let batch = MiBatch::draw(&path, p1, &scheme, config.batch_size, &mut rng)?;
        let out = match objective {
            Objective::CtsmV => mi_loss_ctsm_v(&model, &batch),
            Objective::Ctsm => mi_loss_ctsm(&model, &batch),
            Objective::Tsm => {
                let x0 = sample_matrix(&p0, config.batch_size, &mut rng);
                let x1 = sample_matrix(p1, config.batch_size, &mut rng);
                mi_loss_tsm(&model, &path, &batch, x0.view(), x1.view(), &scheme, config.lambda_dot_coeff)
            }
        };
        let out = match out {
            Ok(o) => o,
            Err(Error::IllConditioned { t, min_eig }) => {
                log::warn!("step {step}: skipped, I + t^2 S ill-conditioned at t = {t} ({min_eig:e})");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            diverged = Some((step, format!("loss {}", out.loss)));
            break;
        }
        let mut params = model.s.clone();
        if let Err(e) = opt.adam_step(params.as_slice_mut().unwrap(), out.grad.as_slice().unwrap()) {
            diverged = Some((step, e.to_string()));
            break;
        }
        model.s = params;
        since.0 += out.loss;
        since.1 += 1;
        if step % every == 0 || step == config.n_iters {
            let est = estimate_mi(&model, eval_xs.view()).unwrap_or(f64::NAN);
            trace.push(MiTraceRow {
                step,
                loss: since.0 / since.1.max(1) as f64,
                mi_estimate: est,
                abs_error: (est - true_value).abs(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            log::info!("step {step}: loss {:.6}, mi {est:.4}", since.0 / since.1.max(1) as f64);
            since = (0.0, 0);
        }
    }
    Ok(MiTrainResult { model, trace, skipped, diverged })
}

/// Symmetric random perturbation, used by tests and smoke runs.
pub fn random_symmetric(dim: usize, scale: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let g = Array2::from_shape_vec((dim, dim), crate::paths::standard_normal_vec(dim * dim, rng)).unwrap();
    (&g + &g.t()) * (0.5 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::mc_marginal_time_score;

    fn setup(d: usize, seed: u64) -> (MiModel, MiBatch, ConditionalGaussianPath, GaussianSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = block_covariance(d, 0.8).unwrap();
        let path = ConditionalGaussianPath::vp_linear(d);
        let model = MiModel::from_matrix(random_symmetric(d, 0.2, &mut rng)).unwrap();
        let batch = MiBatch::draw(&path, &p1, &WeightScheme::TimeNorm { c: 1.0 }, 8, &mut rng).unwrap();
        (model, batch, path, p1)
    }

    fn fd_grad<F: Fn(&MiModel) -> f64>(model: &MiModel, grad: &Array2<f64>, f: F) {
        let d = model.dim();
        let h = 1e-6;
        for (i, j) in [(0, 0), (0, 1), (1, 3), (2, 2), (3, 1)] {
            if i >= d || j >= d {
                continue;
            }
            let mut p = model.clone();
            let mut m = model.clone();
            // symmetric perturbation of the (i, j) and (j, i) entries
            let e = if i == j { h } else { h / 2.0 };
            p.s[[i, j]] += e;
            p.s[[j, i]] += if i == j { 0.0 } else { e };
            m.s[[i, j]] -= e;
            m.s[[j, i]] -= if i == j { 0.0 } else { e };
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = if i == j { grad[[i, i]] } else { grad[[i, j]] };
            assert!((an - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "({i},{j}): {an} vs {fd}");
        }
    }

    #[test]
    fn true_mi_value() {
        assert!((true_mi(40, 0.8) - 10.2165).abs() < 1e-3);
        let c = block_covariance(4, 0.8).unwrap();
        let det: f64 = c.cov_matrix().determinant();
        assert!((true_mi(4, 0.8) + 0.5 * det.ln()).abs() < 1e-12);
    }

    #[test]
    fn entries_sum_to_scalar_and_scalar_is_marginal_time_score() {
        let (model, batch, _, _) = setup(4, 1);
        let v = model.time_score_vec_batch(batch.xs.view(), &batch.ts).unwrap();
        let s = model.time_score_batch(batch.xs.view(), &batch.ts).unwrap();
        for n in 0..s.len() {
            assert!((v.row(n).sum() - s[n]).abs() < 1e-8 * (1.0 + s[n].abs()), "{} vs {}", v.row(n).sum(), s[n]);
        }
        // finite difference of log N(x; 0, I + t^2 S)
        let logp = |x: &[f64], t: f64| {
            let d = model.dim();
            let a = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } + t * t * model.s[[i, j]]);
            let c = a.clone().cholesky().unwrap();
            let xv = nalgebra::DVector::from_column_slice(x);
            let q = xv.dot(&c.solve(&xv));
            -0.5 * (c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>() + q)
        };
        let x = batch.xs.row(0).to_vec();
        let t = batch.ts[0];
        let fd = crate::oracle::fd_time_score(logp, &x, t, 1e-5);
        assert!((fd - s[0]).abs() < 1e-5 * (1.0 + fd.abs()));
    }

    #[test]
    fn dt_values_match_finite_difference() {
        let (model, batch, _, _) = setup(4, 2);
        let sd = model.time_score_dt_batch(batch.xs.view(), &batch.ts).unwrap();
        let h = 1e-6;
        let tp: Vec<f64> = batch.ts.iter().map(|t| t + h).collect();
        let tm: Vec<f64> = batch.ts.iter().map(|t| t - h).collect();
        let p = model.time_score_batch(batch.xs.view(), &tp).unwrap();
        let m = model.time_score_batch(batch.xs.view(), &tm).unwrap();
        for n in 0..sd.len() {
            assert!((sd[n] - (p[n] - m[n]) / (2.0 * h)).abs() < 1e-5 * (1.0 + sd[n].abs()));
        }
    }

    #[test]
    fn ctsm_v_gradient_matches_finite_differences() {
        let (model, batch, _, _) = setup(4, 3);
        let out = mi_loss_ctsm_v(&model, &batch).unwrap();
        fd_grad(&model, &out.grad, |m| mi_loss_ctsm_v(m, &batch).unwrap().loss);
    }

    #[test]
    fn ctsm_gradient_matches_finite_differences() {
        let (model, batch, _, _) = setup(4, 4);
        let out = mi_loss_ctsm(&model, &batch).unwrap();
        fd_grad(&model, &out.grad, |m| mi_loss_ctsm(m, &batch).unwrap().loss);
    }

    #[test]
    fn tsm_gradient_matches_finite_differences() {
        let (model, batch, path, p1) = setup(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = sample_matrix(&StandardNormalSampler { dim: 4 }, 6, &mut rng);
        let x1 = sample_matrix(&p1, 6, &mut rng);
        let scheme = WeightScheme::TimeNorm { c: 1.0 };
        let out = mi_loss_tsm(&model, &path, &batch, x0.view(), x1.view(), &scheme, 2.0).unwrap();
        fd_grad(&model, &out.grad, |m| mi_loss_tsm(m, &path, &batch, x0.view(), x1.view(), &scheme, 2.0).unwrap().loss);
    }

    #[test]
    fn zero_model_estimates_zero_mi() {
        let p1 = block_covariance(6, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = sample_matrix(&p1, 100, &mut rng);
        assert_eq!(estimate_mi(&MiModel::zeros(6), xs.view()).unwrap(), 0.0);
    }

    #[test]
    fn exact_model_recovers_mi_without_training() {
        let d = 40;
        let p1 = block_covariance(d, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = sample_matrix(&p1, 10_000, &mut rng);
        let est = estimate_mi(&MiModel::exact(&p1), xs.view()).unwrap();
        let truth = true_mi(d, 0.8);
        assert!((est - truth).abs() / truth < 0.01, "{est} vs {truth}");
    }

    #[test]
    fn exact_model_matches_monte_carlo_posterior() {
        let d = 4;
        let p1 = block_covariance(d, 0.8).unwrap();
        let model = MiModel::exact(&p1);
        let path = ConditionalGaussianPath::vp_linear(d);
        let p0 = StandardNormalSampler { dim: d };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(t, seed) in &[(0.3, 1u64), (0.6, 2), (0.85, 3)] {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let x = path.sample_path(Endpoints { p0: &p0, p1: &p1 }, t, &mut r2).unwrap().x;
            let est = mc_marginal_time_score(&path, Endpoints { p0: &p0, p1: &p1 }, &x, t, 200_000, &mut rng).unwrap();
            let exact = model.time_score(&x, t).unwrap();
            assert!((est.value - exact).abs() < 4.0 * est.std_err, "t={t}: {} vs {exact} ± {}", est.value, est.std_err);
        }
    }

    #[test]
    fn ill_conditioned_model_is_reported() {
        let mut s = Array2::zeros((2, 2));
        s[[0, 0]] = -1.0;
        let model = MiModel::from_matrix(s).unwrap();
        let xs = Array2::zeros((1, 2));
        assert!(matches!(model.time_score_batch(xs.view(), &[1.0]), Err(Error::IllConditioned { .. })));
    }
}
