//! From time scores to log-ratios, densities, Stein scores and samples.
//!
//! `log p1(x) - log p0(x) = int_0^1 d/dt log p_t(x) dt`, evaluated on the
//! clipped interval `[EPS_TIME, 1 - EPS_TIME]`. Because the integrand does not
//! depend on the running integral, the Dormand-Prince scheme here is a pure
//! adaptive quadrature, and one step sequence can be shared by many points so
//! that each stage is a single batched evaluation.

use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::predict_time_score_batch;
use crate::nn::ScoreNet;
use crate::oracle::{SbMarginal, VpMarginal};
use crate::paths::{standard_normal_vec, EndpointSampler, EPS_TIME};

pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-6;
const SAFETY: f64 = 0.9;
const MIN_STEP: f64 = 1e-8;
const MAX_STEP: f64 = 0.1;
const MAX_STEPS: usize = 1_000_000;

/// A scalar time score `d/dt log p_t(x)`.
pub trait TimeScore {
    fn dim(&self) -> usize;

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64>;

    /// Scores of every row of `xs` at a common time.
    fn time_score_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Vec<f64>> {
        xs.rows().into_iter().map(|r| self.time_score(&r.to_vec(), t)).collect()
    }
}

/// A time score that can also report its gradient in `x`.
pub trait SpatialTimeScore: TimeScore {
    fn time_score_grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    fn time_score_grad_x_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, r) in xs.rows().into_iter().enumerate() {
            let g = self.time_score_grad_x(&r.to_vec(), t)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
        }
        Ok(out)
    }
}

impl TimeScore for ScoreNet {
    fn dim(&self) -> usize {
        ScoreNet::dim(self)
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        crate::losses::predict_time_score(self, x, t)
    }

    fn time_score_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Vec<f64>> {
        predict_time_score_batch(self, xs, &vec![t; xs.nrows()])
    }
}

impl SpatialTimeScore for ScoreNet {
    fn time_score_grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::DimensionMismatch { expected: ScoreNet::dim(self), got: x.len() })?;
        Ok(self.time_score_grad_x_batch(xs, t)?.into_raw_vec_and_offset().0)
    }

    fn time_score_grad_x_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let up = Array2::from_elem((xs.nrows(), self.n_out()), self.output_scale(t));
        self.input_gradient_batch(xs, &vec![t; xs.nrows()], up.view())
    }
}

impl TimeScore for VpMarginal {
    fn dim(&self) -> usize {
        VpMarginal::dim(self)
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        VpMarginal::time_score(self, x, t)
    }
}

impl TimeScore for SbMarginal {
    fn dim(&self) -> usize {
        SbMarginal::dim(self)
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        SbMarginal::time_score(self, x, t)
    }
}

impl SpatialTimeScore for VpMarginal {
    fn time_score_grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.time_score_with_grad(x, t)?.1)
    }
}

/// Wraps `f(x, t)` as a [`TimeScore`].
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> f64> TimeScore for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok((self.f)(x, t))
    }
}

/// Wraps a score and its spatial gradient as a [`SpatialTimeScore`].
pub struct FnSpatialScore<F, G> {
    pub dim: usize,
    pub f: F,
    pub grad: G,
}

impl<F: Fn(&[f64], f64) -> f64, G> TimeScore for FnSpatialScore<F, G> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok((self.f)(x, t))
    }
}

impl<F: Fn(&[f64], f64) -> f64, G: Fn(&[f64], f64) -> Vec<f64>> SpatialTimeScore for FnSpatialScore<F, G> {
    fn time_score_grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.grad)(x, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioMethod {
    Riemann { k: usize },
    Adaptive { rtol: f64, atol: f64, n_evals: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub x: Vec<f64>,
    /// `log p1(x) - log p0(x)` in nats.
    pub log_ratio: f64,
    pub method: RatioMethod,
    pub eps_time: f64,
}

impl RatioEstimate {
    pub fn n_evals(&self) -> usize {
        match self.method {
            RatioMethod::Riemann { k } => k,
            RatioMethod::Adaptive { n_evals, .. } => n_evals,
        }
    }
}

fn clipped() -> (f64, f64) {
    (EPS_TIME, 1.0 - EPS_TIME)
}

fn finite(v: f64, t: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: "time score", t })
    }
}

/// Left endpoints of `k` uniform cells on the clipped interval.
pub fn riemann_nodes(k: usize) -> Vec<f64> {
    let (lo, hi) = clipped();
    (0..k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect()
}

/// `(1/K) sum_i s(x, t_i)` over the left endpoints of a uniform grid.
pub fn log_ratio_riemann(score: &dyn TimeScore, x: &[f64], k: usize) -> Result<RatioEstimate> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let mut sum = 0.0;
    for t in riemann_nodes(k) {
        sum += finite(score.time_score(x, t)?, t)?;
    }
    Ok(RatioEstimate { x: x.to_vec(), log_ratio: sum / k as f64, method: RatioMethod::Riemann { k }, eps_time: EPS_TIME })
}

/// Riemann estimates for every row of `xs`.
pub fn log_ratio_riemann_batch(score: &dyn TimeScore, xs: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let mut sum = vec![0.0; xs.nrows()];
    for t in riemann_nodes(k) {
        for (s, v) in sum.iter_mut().zip(score.time_score_batch(xs, t)?) {
            *s += finite(v, t)?;
        }
    }
    Ok(sum.into_iter().map(|s| s / k as f64).collect())
}

// Dormand-Prince 4(5). The integrand depends on t only, so the stage times
// and the two weight rows are all that matter; stages 6 and 7 coincide.
const DP_C: [f64; 6] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0];
const DP_B5: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const DP_B4: [f64; 7] = [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Result of adaptive quadrature of a vector integrand.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub values: Vec<f64>,
    pub n_evals: usize,
    /// Accepted `(t, weight)` pairs; reusing them reproduces `values` exactly
    /// up to summation order.
    pub nodes: Vec<(f64, f64)>,
}

/// Adaptive Dormand-Prince quadrature of `f(t)` over `[lo, hi]`, with an
/// RMS error norm over the components.
pub fn integrate_adaptive<F>(mut f: F, lo: f64, hi: f64, rtol: f64, atol: f64) -> Result<Quadrature>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("empty interval [{lo}, {hi}]")));
    }
    let mut t = lo;
    let mut k_first = f(t)?;
    let n = k_first.len();
    check_finite(&k_first, t)?;
    let mut n_evals = 1;
    let mut y = vec![0.0; n];
    let mut h = 0.01f64.min(hi - lo).min(MAX_STEP);
    let mut nodes: Vec<(f64, f64)> = Vec::new();
    let mut steps = 0;
    while t < hi {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::IntegrationFailure { t, step: h });
        }
        let last = t + h >= hi;
        if last {
            h = hi - t;
        }
        let mut ks = Vec::with_capacity(6);
        ks.push(k_first.clone());
        for &c in &DP_C[1..] {
            let tc = if c == 1.0 { t + h } else { t + c * h };
            let k = f(tc)?;
            check_finite(&k, tc)?;
            n_evals += 1;
            ks.push(k);
        }
        let mut err_sq = 0.0;
        let mut y_new = vec![0.0; n];
        for j in 0..n {
            let mut inc5 = 0.0;
            let mut inc4 = 0.0;
            for i in 0..6 {
                inc5 += DP_B5[i] * ks[i][j];
                inc4 += DP_B4[i] * ks[i][j];
            }
            inc4 += DP_B4[6] * ks[5][j];
            y_new[j] = y[j] + h * inc5;
            let scale = atol + rtol * y[j].abs().max(y_new[j].abs());
            let e = h * (inc5 - inc4) / scale;
            err_sq += e * e;
        }
        let err = (err_sq / n.max(1) as f64).sqrt();
        if err <= 1.0 {
            for (i, &c) in DP_C.iter().enumerate() {
                if DP_B5[i] != 0.0 {
                    nodes.push((t + c * h, h * DP_B5[i]));
                }
            }
            t = if last { hi } else { t + h };
            y = y_new;
            k_first = ks.pop().unwrap();
            let factor = if err == 0.0 { 10.0 } else { (SAFETY * err.powf(-0.2)).clamp(0.2, 10.0) };
            h = (h * factor).clamp(MIN_STEP, MAX_STEP);
        } else {
            if h <= MIN_STEP {
                return Err(Error::IntegrationFailure { t, step: h });
            }
            let factor = (SAFETY * err.powf(-0.2)).clamp(0.2, 1.0);
            h = (h * factor).max(MIN_STEP);
        }
    }
    Ok(Quadrature { values: y, n_evals, nodes })
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: "time score", t })
    }
}

/// Adaptive log-ratio at one point.
pub fn log_ratio_adaptive(score: &dyn TimeScore, x: &[f64], rtol: f64, atol: f64) -> Result<RatioEstimate> {
    let (lo, hi) = clipped();
    let q = integrate_adaptive(|t| Ok(vec![score.time_score(x, t)?]), lo, hi, rtol, atol)?;
    Ok(RatioEstimate {
        x: x.to_vec(),
        log_ratio: q.values[0],
        method: RatioMethod::Adaptive { rtol, atol, n_evals: q.n_evals },
        eps_time: EPS_TIME,
    })
}

/// Adaptive log-ratios of every row of `xs`, sharing one step sequence.
/// Returns the estimates and the number of batched evaluations.
pub fn log_ratio_adaptive_batch(score: &dyn TimeScore, xs: ArrayView2<'_, f64>, rtol: f64, atol: f64) -> Result<(Vec<f64>, usize)> {
    let (lo, hi) = clipped();
    let q = integrate_adaptive(|t| score.time_score_batch(xs, t), lo, hi, rtol, atol)?;
    Ok((q.values, q.n_evals))
}

/// `log p1_hat(x) = log_ratio + log p0(x)` and its bits per dimension.
pub fn log_density_and_bpd(log_ratio: f64, log_p0: &dyn Fn(&[f64]) -> f64, x: &[f64], dim: usize) -> (f64, f64) {
    let lp = log_ratio + log_p0(x);
    (lp, -lp / (dim as f64 * std::f64::consts::LN_2))
}

pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + sq)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrator {
    Riemann { k: usize },
    Adaptive { rtol: f64, atol: f64 },
    GaussLegendre { n: usize },
}

/// Quadrature nodes and weights for `int_lo^t`. Adaptive rules settle their
/// nodes on the scalar integrand first and then keep them fixed.
pub fn quadrature_nodes(score: &dyn TimeScore, x: &[f64], lo: f64, t: f64, integrator: Integrator) -> Result<Vec<(f64, f64)>> {
    if t <= lo {
        return Ok(Vec::new());
    }
    Ok(match integrator {
        Integrator::Riemann { k } => {
            let k = k.max(1);
            (0..k).map(|i| (lo + (t - lo) * i as f64 / k as f64, (t - lo) / k as f64)).collect()
        }
        Integrator::Adaptive { rtol, atol } => integrate_adaptive(|s| Ok(vec![score.time_score(x, s)?]), lo, t, rtol, atol)?.nodes,
        Integrator::GaussLegendre { n } => gauss_legendre_on(n, lo, t),
    })
}

/// `grad_x log p_t(x) = grad_x int_eps^t d/dtau log p_tau(x) dtau + grad_x log p0(x)`,
/// computed as the quadrature of gradients over frozen nodes.
pub fn stein_score_via_integral(
    score: &dyn SpatialTimeScore,
    grad_log_p0: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    t: f64,
    integrator: Integrator,
) -> Result<Vec<f64>> {
    let hi = t.min(1.0 - EPS_TIME);
    let nodes = quadrature_nodes(score, x, EPS_TIME, hi, integrator)?;
    let mut g = grad_log_p0(x);
    for (tn, w) in nodes {
        let gi = score.time_score_grad_x(x, tn)?;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += w * b;
        }
    }
    Ok(g)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let (z, w) = gauss_legendre(n);
    let half = 0.5 * (hi - lo);
    z.iter().zip(&w).map(|(zi, wi)| (lo + half * (zi + 1.0), half * wi)).collect()
}

#[derive(Clone, Debug)]
pub struct HmcConfig {
    pub n_inter: usize,
    pub hmc_steps_per_level: usize,
    pub leapfrog: usize,
    pub refine: usize,
    pub step_size: f64,
    pub n_chains: usize,
    /// Gauss-Legendre nodes used for each intermediate `int_eps^t`.
    pub quad_nodes: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { n_inter: 1000, hmc_steps_per_level: 1, leapfrog: 10, refine: 100, step_size: 0.25, n_chains: 100, quad_nodes: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct HmcResult {
    /// Final states, one row per chain.
    pub samples: Array2<f64>,
    /// Mean acceptance probability per annealing level, then per refinement step.
    pub acceptance: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Intermediate target `log p_t(x) = log p0(x) + int_eps^t s(x, tau) dtau`
/// on a fixed Gauss-Legendre rule, evaluated for every chain.
struct AnnealedTarget<'a> {
    score: &'a dyn SpatialTimeScore,
    log_p0: &'a dyn Fn(&[f64]) -> f64,
    grad_log_p0: &'a dyn Fn(&[f64]) -> Vec<f64>,
    nodes: usize,
}

impl AnnealedTarget<'_> {
    fn rule(&self, t: f64) -> Vec<(f64, f64)> {
        if t <= EPS_TIME {
            Vec::new()
        } else {
            gauss_legendre_on(self.nodes, EPS_TIME, t)
        }
    }

    fn log_density(&self, xs: ArrayView2<'_, f64>, rule: &[(f64, f64)]) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = xs.rows().into_iter().map(|r| (self.log_p0)(r.as_slice().unwrap())).collect();
        for &(tn, w) in rule {
            for (o, s) in out.iter_mut().zip(self.score.time_score_batch(xs, tn)?) {
                *o += w * s;
            }
        }
        Ok(out)
    }

    fn grad(&self, xs: ArrayView2<'_, f64>, rule: &[(f64, f64)]) -> Result<Array2<f64>> {
        let mut g = Array2::zeros(xs.raw_dim());
        for (i, r) in xs.rows().into_iter().enumerate() {
            g.row_mut(i).assign(&ndarray::ArrayView1::from(&(self.grad_log_p0)(r.as_slice().unwrap())));
        }
        for &(tn, w) in rule {
            g.scaled_add(w, &self.score.time_score_grad_x_batch(xs, tn)?);
        }
        Ok(g)
    }
}

/// One leapfrog trajectory of `n` steps for unit-mass Hamiltonian dynamics.
pub fn leapfrog<G>(x: &mut [f64], p: &mut [f64], step: f64, n: usize, grad_log_density: G) -> Result<()>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut g = grad_log_density(x)?;
    for _ in 0..n {
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += step * pi;
        }
        g = grad_log_density(x)?;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
    }
    Ok(())
}

fn uniform01(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Annealed HMC from `p0` through the intermediate densities defined by the
/// integrated time score, followed by `refine` steps at the final level.
pub fn annealed_hmc_sample(
    score: &dyn SpatialTimeScore,
    p0: &dyn EndpointSampler,
    log_p0: &dyn Fn(&[f64]) -> f64,
    grad_log_p0: &dyn Fn(&[f64]) -> Vec<f64>,
    config: &HmcConfig,
    rng: &mut dyn RngCore,
) -> Result<HmcResult> {
    let d = p0.dim();
    if score.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: score.dim() });
    }
    let n = config.n_chains;
    let mut xs = Array2::zeros((n, d));
    for mut row in xs.rows_mut() {
        row.assign(&ndarray::ArrayView1::from(&p0.sample(rng)));
    }
    let target = AnnealedTarget { score, log_p0, grad_log_p0, nodes: config.quad_nodes.max(1) };
    let (lo, hi) = clipped();
    let mut acceptance = Vec::with_capacity(config.n_inter + config.refine);
    let levels = (1..=config.n_inter).map(|l| (lo + (hi - lo) * l as f64 / config.n_inter as f64, config.hmc_steps_per_level));
    let refine = std::iter::repeat_n((hi, 1), config.refine);
    for (t, steps) in levels.chain(refine) {
        let rule = target.rule(t);
        let mut acc_sum = 0.0;
        for _ in 0..steps {
            acc_sum += hmc_step(&target, &rule, &mut xs, config, rng)?;
        }
        acceptance.push(acc_sum / steps.max(1) as f64);
    }
    let mut warnings = Vec::new();
    if config.n_inter >= 100 {
        for start in 0..=(config.n_inter - 100) {
            let mean = acceptance[start..start + 100].iter().sum::<f64>() / 100.0;
            if mean < 0.01 {
                warnings.push(format!("acceptance {mean:.4} below 1% over levels {start}..{}", start + 100));
                break;
            }
        }
    }
    Ok(HmcResult { samples: xs, acceptance, warnings })
}

fn hmc_step(target: &AnnealedTarget<'_>, rule: &[(f64, f64)], xs: &mut Array2<f64>, config: &HmcConfig, rng: &mut dyn RngCore) -> Result<f64> {
    let (n, d) = xs.dim();
    let mut p = Array2::zeros((n, d));
    for mut row in p.rows_mut() {
        row.assign(&ndarray::ArrayView1::from(&standard_normal_vec(d, rng)));
    }
    let h0: Vec<f64> = {
        let lp = target.log_density(xs.view(), rule)?;
        lp.iter().zip(p.rows()).map(|(l, r)| -l + 0.5 * r.dot(&r)).collect()
    };
    let mut x = xs.clone();
    let eps = config.step_size;
    let mut g = target.grad(x.view(), rule)?;
    for _ in 0..config.leapfrog {
        p.scaled_add(0.5 * eps, &g);
        x.scaled_add(eps, &p);
        g = target.grad(x.view(), rule)?;
        p.scaled_add(0.5 * eps, &g);
    }
    let lp1 = target.log_density(x.view(), rule)?;
    let mut acc = 0.0;
    for i in 0..n {
        let h1 = -lp1[i] + 0.5 * p.row(i).dot(&p.row(i));
        let a = if h1.is_finite() { (h0[i] - h1).min(0.0).exp() } else { 0.0 };
        acc += a;
        if uniform01(rng) < a {
            xs.row_mut(i).assign(&x.row(i));
        }
    }
    Ok(acc / n as f64)
}
