//! Ground truth for Gaussian and Gaussian-mixture endpoints.
//!
//! Under the VP path with a standard normal `p0`, each mixture component
//! `N(m, S)` of `p1` becomes `N(alpha m, alpha^2 S + (1 - alpha^2) I)` at time
//! `t`. Both covariances share the eigenbasis of `S`, so every quantity here
//! is evaluated in that basis with diagonal algebra. The SB marginal between
//! two mixtures with diagonal components is a mixture over component pairs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::paths::{standard_normal_vec, Conditioning, ConditionalGaussianPath, EndpointSampler, Endpoints, NoiseSchedule, PathKind};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    /// Row-major `D x D`.
    Full(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: Covariance,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter("empty mean".into()));
        }
        let m = match &cov {
            Covariance::Isotropic(v) => DMatrix::from_diagonal_element(d, d, *v),
            Covariance::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: v.len() });
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(v))
            }
            Covariance::Full(v) => {
                if v.len() != d * d {
                    return Err(Error::DimensionMismatch { expected: d * d, got: v.len() });
                }
                let m = DMatrix::from_row_slice(d, d, v);
                if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                    return Err(Error::NotSpd);
                }
                m
            }
        };
        let chol = Cholesky::new(m).ok_or(Error::NotSpd)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(mean, Covariance::Isotropic(var))
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(vec![0.0; dim], 1.0).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let r = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let y = self.chol.l().solve_lower_triangular(&r).unwrap();
        let logdet: f64 = 2.0 * self.chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d as f64 * LN_2PI + logdet + y.norm_squared()))
    }

    /// `(tr Sigma + |mu|^2) / D`, the statistic used by time normalisation.
    pub fn time_norm_c(&self) -> f64 {
        let tr = self.cov_matrix().trace();
        let m2: f64 = self.mean.iter().map(|v| v * v).sum();
        (tr + m2) / self.dim() as f64
    }
}

impl EndpointSampler for GaussianSpec {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let d = self.dim();
        let e = DVector::from_vec(standard_normal_vec(d, rng));
        let y = self.chol.l() * e;
        y.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GmmSpec {
    weights: Vec<f64>,
    components: Vec<GaussianSpec>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianSpec>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidParameter("weights and components must be non-empty and equally long".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter("mixture weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {sum}")));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        Ok(Self { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianSpec] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            terms.push(w.ln() + c.log_density(x)?);
        }
        Ok(log_sum_exp(&terms))
    }

    /// `(tr Cov + |mean|^2) / D` of the mixture, i.e. the mean second moment per dimension.
    pub fn time_norm_c(&self) -> f64 {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.time_norm_c() * d)
            .sum::<f64>()
            / d
    }
}

impl From<GaussianSpec> for GmmSpec {
    fn from(g: GaussianSpec) -> Self {
        Self { weights: vec![1.0], components: vec![g] }
    }
}

impl EndpointSampler for GmmSpec {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut acc = 0.0;
        for (w, c) in self.weights.iter().zip(&self.components) {
            acc += w;
            if u < acc {
                return c.sample(rng);
            }
        }
        self.components.last().unwrap().sample(rng)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Two-component, equal-weight isotropic mixture with component means
/// `center -/+ k sigma / 2` and `sigma^2 = 4 / (4 + k^2)`, which has unit
/// variance per dimension.
pub fn bimodal_gmm(dim: usize, center: f64, k: f64) -> Result<GmmSpec> {
    let sigma = (4.0 / (4.0 + k * k)).sqrt();
    let lo = GaussianSpec::isotropic(vec![center - 0.5 * k * sigma; dim], sigma * sigma)?;
    let hi = GaussianSpec::isotropic(vec![center + 0.5 * k * sigma; dim], sigma * sigma)?;
    GmmSpec::new(vec![0.5, 0.5], vec![lo, hi])
}

struct EigenComponent {
    log_w: f64,
    basis: DMatrix<f64>,
    /// Eigenvalues of the component covariance.
    spectrum: Vec<f64>,
    /// Component mean in the eigenbasis.
    mean: Vec<f64>,
}

/// Closed-form VP marginal `p_t` for a mixture `p1` and standard normal `p0`.
pub struct VpMarginal {
    schedule: NoiseSchedule,
    dim: usize,
    components: Vec<EigenComponent>,
}

/// Per-component quantities at one `(x, t)`.
struct ComponentTerms {
    log_joint: f64,
    time: f64,
    c: Vec<f64>,
    c_dot: Vec<f64>,
    r: Vec<f64>,
}

impl VpMarginal {
    pub fn new(p1: &GmmSpec, path: &ConditionalGaussianPath) -> Result<Self> {
        let schedule = match path.kind() {
            PathKind::Vp { schedule } => schedule,
            PathKind::Sb { .. } => return Err(Error::Unsupported("closed-form marginals need the VP path".into())),
        };
        if path.dim() != p1.dim() {
            return Err(Error::DimensionMismatch { expected: path.dim(), got: p1.dim() });
        }
        let components = p1
            .weights
            .iter()
            .zip(&p1.components)
            .map(|(w, c)| {
                let eig = SymmetricEigen::new(c.cov_matrix());
                let m = DVector::from_column_slice(&c.mean);
                let mean = (eig.eigenvectors.transpose() * m).iter().cloned().collect();
                EigenComponent { log_w: w.ln(), basis: eig.eigenvectors, spectrum: eig.eigenvalues.iter().cloned().collect(), mean }
            })
            .collect();
        Ok(Self { schedule, dim: path.dim(), components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn terms(&self, x: &[f64], t: f64) -> Result<Vec<ComponentTerms>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let a = self.schedule.alpha(t);
        let ad = self.schedule.alpha_dot(t);
        let xv = DVector::from_column_slice(x);
        let mut out = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            let xr = comp.basis.transpose() * &xv;
            let mut log_n = -0.5 * self.dim as f64 * LN_2PI;
            let mut time = 0.0;
            let mut cs = Vec::with_capacity(self.dim);
            let mut cds = Vec::with_capacity(self.dim);
            let mut rs = Vec::with_capacity(self.dim);
            for k in 0..self.dim {
                let s = comp.spectrum[k];
                let c = a * a * s + 1.0 - a * a;
                let cd = 2.0 * a * ad * (s - 1.0);
                let r = xr[k] - a * comp.mean[k];
                log_n -= 0.5 * (c.ln() + r * r / c);
                time += -0.5 * cd / c + ad * comp.mean[k] * r / c + 0.5 * r * r * cd / (c * c);
                cs.push(c);
                cds.push(cd);
                rs.push(r);
            }
            out.push(ComponentTerms { log_joint: comp.log_w + log_n, time, c: cs, c_dot: cds, r: rs });
        }
        Ok(out)
    }

    fn responsibilities(terms: &[ComponentTerms]) -> Vec<f64> {
        let lj: Vec<f64> = terms.iter().map(|c| c.log_joint).collect();
        let z = log_sum_exp(&lj);
        lj.iter().map(|l| (l - z).exp()).collect()
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        let terms = self.terms(x, t)?;
        Ok(log_sum_exp(&terms.iter().map(|c| c.log_joint).collect::<Vec<_>>()))
    }

    /// `d/dt log p_t(x)`.
    pub fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        let terms = self.terms(x, t)?;
        let pi = Self::responsibilities(&terms);
        Ok(pi.iter().zip(&terms).map(|(p, c)| p * c.time).sum())
    }

    /// `grad_x log p_t(x)`.
    pub fn stein_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let terms = self.terms(x, t)?;
        let pi = Self::responsibilities(&terms);
        let mut g = DVector::zeros(self.dim);
        for ((p, c), comp) in pi.iter().zip(&terms).zip(&self.components) {
            let local = DVector::from_iterator(self.dim, (0..self.dim).map(|k| -c.r[k] / c.c[k]));
            g += *p * (&comp.basis * local);
        }
        Ok(g.iter().cloned().collect())
    }

    /// Time score and its gradient in `x`.
    pub fn time_score_with_grad(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        let terms = self.terms(x, t)?;
        let pi = Self::responsibilities(&terms);
        let ad = self.schedule.alpha_dot(t);
        let mean_time: f64 = pi.iter().zip(&terms).map(|(p, c)| p * c.time).sum();
        let mut hs = Vec::with_capacity(terms.len());
        let mut hbar = DVector::zeros(self.dim);
        for ((p, c), comp) in pi.iter().zip(&terms).zip(&self.components) {
            let h = &comp.basis * DVector::from_iterator(self.dim, (0..self.dim).map(|k| -c.r[k] / c.c[k]));
            hbar += *p * &h;
            hs.push(h);
        }
        let mut g = DVector::zeros(self.dim);
        for (((p, c), comp), h) in pi.iter().zip(&terms).zip(&self.components).zip(&hs) {
            let local = DVector::from_iterator(
                self.dim,
                (0..self.dim).map(|k| ad * comp.mean[k] / c.c[k] + c.c_dot[k] * c.r[k] / (c.c[k] * c.c[k])),
            );
            g += *p * (&comp.basis * local);
            g += (*p * c.time) * (h - &hbar);
        }
        Ok((mean_time, g.iter().cloned().collect()))
    }
}

struct DiagComponent {
    log_w: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn diag_components(g: &GmmSpec) -> Result<Vec<DiagComponent>> {
    let d = g.dim();
    g.weights
        .iter()
        .zip(&g.components)
        .map(|(w, c)| {
            let var = match &c.cov {
                Covariance::Isotropic(v) => vec![*v; d],
                Covariance::Diagonal(v) => v.clone(),
                Covariance::Full(_) => return Err(Error::Unsupported("closed-form bridge marginals need diagonal covariances".into())),
            };
            Ok(DiagComponent { log_w: w.ln(), mean: c.mean.clone(), var })
        })
        .collect()
}

/// Closed-form SB marginal between two mixtures with diagonal component
/// covariances. Under the product coupling every pair of components gives a
/// Gaussian with mean `(1-t) m0 + t m1` and variance
/// `(1-t)^2 v0 + t^2 v1 + sigma^2 t (1-t)`.
pub struct SbMarginal {
    sigma: f64,
    dim: usize,
    c0: Vec<DiagComponent>,
    c1: Vec<DiagComponent>,
}

impl SbMarginal {
    pub fn new(p0: &GmmSpec, p1: &GmmSpec, path: &ConditionalGaussianPath) -> Result<Self> {
        let sigma = match path.kind() {
            PathKind::Sb { sigma } => sigma,
            PathKind::Vp { .. } => return Err(Error::Unsupported("bridge marginals need the SB path".into())),
        };
        for g in [p0, p1] {
            if g.dim() != path.dim() {
                return Err(Error::DimensionMismatch { expected: path.dim(), got: g.dim() });
            }
        }
        Ok(Self { sigma, dim: path.dim(), c0: diag_components(p0)?, c1: diag_components(p1)? })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(log weight + log N, component time score)` per component pair.
    fn terms(&self, x: &[f64], t: f64) -> Result<Vec<(f64, f64)>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let s2 = self.sigma * self.sigma;
        let mut out = Vec::with_capacity(self.c0.len() * self.c1.len());
        for a in &self.c0 {
            for b in &self.c1 {
                let mut log_n = -0.5 * self.dim as f64 * LN_2PI;
                let mut time = 0.0;
                for k in 0..self.dim {
                    let c = (1.0 - t) * (1.0 - t) * a.var[k] + t * t * b.var[k] + s2 * t * (1.0 - t);
                    let cd = -2.0 * (1.0 - t) * a.var[k] + 2.0 * t * b.var[k] + s2 * (1.0 - 2.0 * t);
                    let md = b.mean[k] - a.mean[k];
                    let r = x[k] - (1.0 - t) * a.mean[k] - t * b.mean[k];
                    log_n -= 0.5 * (c.ln() + r * r / c);
                    time += -0.5 * cd / c + md * r / c + 0.5 * r * r * cd / (c * c);
                }
                out.push((a.log_w + b.log_w + log_n, time));
            }
        }
        Ok(out)
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        let terms = self.terms(x, t)?;
        Ok(log_sum_exp(&terms.iter().map(|c| c.0).collect::<Vec<_>>()))
    }

    /// `d/dt log p_t(x)`.
    pub fn time_score(&self, x: &[f64], t: f64) -> Result<f64> {
        let terms = self.terms(x, t)?;
        let z = log_sum_exp(&terms.iter().map(|c| c.0).collect::<Vec<_>>());
        Ok(terms.iter().map(|(l, s)| (l - z).exp() * s).sum())
    }
}

/// Exact `d/dt log p_t(x)` for a VP path from `N(0, I)` to `p1`.
pub fn analytic_marginal_time_score(p1: &GmmSpec, path: &ConditionalGaussianPath, x: &[f64], t: f64) -> Result<f64> {
    VpMarginal::new(p1, path)?.time_score(x, t)
}

/// Exact `log p_t(x)` for a VP path from `N(0, I)` to `p1`.
pub fn analytic_marginal_log_density(p1: &GmmSpec, path: &ConditionalGaussianPath, x: &[f64], t: f64) -> Result<f64> {
    VpMarginal::new(p1, path)?.log_density(x, t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    /// Jackknife standard error of the self-normalised ratio.
    pub std_err: f64,
    /// Kish effective sample size of the normalised weights.
    pub ess: f64,
    /// Raised when the effective sample size falls below 10.
    pub low_ess: bool,
}

/// Minimum effective sample size before an estimate is flagged.
pub const MIN_ESS: f64 = 10.0;

/// Self-normalised importance estimate of `E_{p_t(z|x)}[d/dt log p_t(x|z)]`
/// with prior proposals `z ~ p(z)` and weights `p_t(x | z)`.
pub fn mc_marginal_time_score(
    path: &ConditionalGaussianPath,
    endpoints: Endpoints<'_>,
    x: &[f64],
    t: f64,
    n_mc: usize,
    rng: &mut dyn RngCore,
) -> Result<McEstimate> {
    let zs: Vec<Conditioning> = (0..n_mc).map(|_| path.sample_conditioning(endpoints, rng)).collect();
    mc_marginal_time_score_from(path, &zs, x, t)
}

/// As [`mc_marginal_time_score`], over a fixed set of prior draws.
pub fn mc_marginal_time_score_from(path: &ConditionalGaussianPath, zs: &[Conditioning], x: &[f64], t: f64) -> Result<McEstimate> {
    mc_posterior_mean_from(path, zs, x, t, |eps, z| path.time_score_from_eps(eps, z, t))
}

/// Self-normalised importance estimate of the posterior mean of any
/// conditional function `f(eps, z)`, where `eps` is the standardised residual
/// of `x` under `p_t(x | z)`.
pub fn mc_posterior_mean_from<F>(path: &ConditionalGaussianPath, zs: &[Conditioning], x: &[f64], t: f64, f: F) -> Result<McEstimate>
where
    F: Fn(&[f64], &Conditioning) -> f64,
{
    if zs.is_empty() {
        return Err(Error::InvalidParameter("no proposal draws".into()));
    }
    let mut logw = Vec::with_capacity(zs.len());
    let mut fs = Vec::with_capacity(zs.len());
    for z in zs {
        let eps = path.residual(x, z, t)?;
        let sq: f64 = eps.iter().map(|e| e * e).sum();
        logw.push(-0.5 * sq);
        fs.push(f(&eps, z));
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let sw: f64 = w.iter().sum();
    let swf: f64 = w.iter().zip(&fs).map(|(a, b)| a * b).sum();
    let value = swf / sw;
    let n = zs.len() as f64;
    let sw2: f64 = w.iter().map(|a| a * a).sum();
    let ess = sw * sw / sw2;
    let std_err = if zs.len() > 1 {
        let loo: Vec<f64> = w
            .iter()
            .zip(&fs)
            .map(|(wi, fi)| {
                let den = sw - wi;
                if den > 0.0 {
                    (swf - wi * fi) / den
                } else {
                    value
                }
            })
            .collect();
        let mean = loo.iter().sum::<f64>() / n;
        ((n - 1.0) / n * loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate { value, std_err, ess, low_ess: ess < MIN_ESS })
}

/// Monte Carlo `log p_t(x) = log mean_i p_t(x | z_i)` over fixed prior draws.
pub fn mc_marginal_log_density_from(path: &ConditionalGaussianPath, zs: &[Conditioning], x: &[f64], t: f64) -> Result<f64> {
    let mut terms = Vec::with_capacity(zs.len());
    for z in zs {
        terms.push(path.cond_log_density(x, z, t)?);
    }
    Ok(log_sum_exp(&terms) - (zs.len() as f64).ln())
}

/// `Var[a |eps|^2 + b eps^T x]` for `eps ~ N(0, I_D)` and `x` with
/// per-dimension second moment `c`.
pub fn lemma1_variance(a: f64, b: f64, c: f64, d: usize) -> f64 {
    let d = d as f64;
    2.0 * a * a * d + b * b * c * d
}

/// Central difference of `f(x, .)` at `t`.
pub fn fd_time_score<F>(log_density: F, x: &[f64], t: f64, h: f64) -> f64
where
    F: Fn(&[f64], f64) -> f64,
{
    (log_density(x, t + h) - log_density(x, t - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::StandardNormalSampler;
    use crate::weighting::lambda_time;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_log_density_at_origin() {
        let g = GaussianSpec::standard(1);
        assert!((g.log_density(&[0.0]).unwrap() + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicate_components_equal_single_component() {
        let g = GaussianSpec::new(vec![1.0, -2.0], Covariance::Diagonal(vec![0.5, 2.0])).unwrap();
        let m = GmmSpec::new(vec![0.5, 0.5], vec![g.clone(), g.clone()]).unwrap();
        let x = [0.3, 0.1];
        assert!((m.log_density(&x).unwrap() - g.log_density(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn full_covariance_matches_independent_quadratic_form() {
        // 5x5 SPD matrix A A^T + I and a direct inverse via Gauss-Jordan in the test
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 5;
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = GaussianSpec::new(mean.clone(), Covariance::Full(s.clone())).unwrap();

        // elimination with partial pivoting, tracking the determinant
        let mut aug = vec![0.0; d * (d + 1)];
        for i in 0..d {
            for j in 0..d {
                aug[i * (d + 1) + j] = s[i * d + j];
            }
            aug[i * (d + 1) + d] = x[i] - mean[i];
        }
        let mut det = 1.0;
        for col in 0..d {
            let piv = (col..d).max_by(|&p, &q| aug[p * (d + 1) + col].abs().total_cmp(&aug[q * (d + 1) + col].abs())).unwrap();
            if piv != col {
                for j in 0..=d {
                    aug.swap(piv * (d + 1) + j, col * (d + 1) + j);
                }
                det = -det;
            }
            let p = aug[col * (d + 1) + col];
            det *= p;
            for r in 0..d {
                if r != col {
                    let f = aug[r * (d + 1) + col] / p;
                    for j in col..=d {
                        aug[r * (d + 1) + j] -= f * aug[col * (d + 1) + j];
                    }
                }
            }
        }
        let sol: Vec<f64> = (0..d).map(|i| aug[i * (d + 1) + d] / aug[i * (d + 1) + i]).collect();
        let quad: f64 = sol.iter().zip(&x).zip(&mean).map(|((s, xi), mi)| s * (xi - mi)).sum();
        let expected = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad);
        assert!((g.log_density(&x).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn non_spd_is_rejected() {
        let r = GaussianSpec::new(vec![0.0, 0.0], Covariance::Full(vec![1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(r, Err(Error::NotSpd)));
    }

    #[test]
    fn analytic_score_matches_finite_difference() {
        let path = ConditionalGaussianPath::vp_linear(1);
        let p1: GmmSpec = GaussianSpec::isotropic(vec![4.0], 1.0).unwrap().into();
        let s = analytic_marginal_time_score(&p1, &path, &[4.0], 0.5).unwrap();
        let fd = fd_time_score(|x, t| analytic_marginal_log_density(&p1, &path, x, t).unwrap(), &[4.0], 0.5, 1e-5);
        assert!((s - fd).abs() < 1e-7);
    }

    #[test]
    fn stationary_path_has_zero_time_score() {
        let path = ConditionalGaussianPath::vp_linear(3);
        let p1: GmmSpec = GaussianSpec::standard(3).into();
        for &t in &[0.1, 0.5, 0.9] {
            assert!(analytic_marginal_time_score(&p1, &path, &[0.5, -1.0, 2.0], t).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_mixture_matches_gaussian() {
        let path = ConditionalGaussianPath::vp_linear(2);
        let g = GaussianSpec::new(vec![1.0, 3.0], Covariance::Diagonal(vec![0.7, 1.4])).unwrap();
        let single: GmmSpec = g.clone().into();
        let mix = GmmSpec::new(vec![0.3, 0.7], vec![g.clone(), g]).unwrap();
        let x = [0.2, 1.1];
        let a = analytic_marginal_time_score(&single, &path, &x, 0.4).unwrap();
        let b = analytic_marginal_time_score(&mix, &path, &x, 0.4).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn marginal_gradients_match_finite_differences() {
        let path = ConditionalGaussianPath::vp_linear(2);
        let c1 = GaussianSpec::new(vec![1.0, -1.0], Covariance::Full(vec![1.0, 0.3, 0.3, 0.5])).unwrap();
        let c2 = GaussianSpec::isotropic(vec![-2.0, 0.5], 0.4).unwrap();
        let p1 = GmmSpec::new(vec![0.4, 0.6], vec![c1, c2]).unwrap();
        let m = VpMarginal::new(&p1, &path).unwrap();
        let x = [0.3, -0.2];
        let t = 0.6;
        let (s, g) = m.time_score_with_grad(&x, t).unwrap();
        assert!((s - m.time_score(&x, t).unwrap()).abs() < 1e-14);
        let stein = m.stein_score(&x, t).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd_s = (m.time_score(&xp, t).unwrap() - m.time_score(&xm, t).unwrap()) / (2.0 * h);
            let fd_l = (m.log_density(&xp, t).unwrap() - m.log_density(&xm, t).unwrap()) / (2.0 * h);
            assert!((g[i] - fd_s).abs() < 1e-6, "{} vs {fd_s}", g[i]);
            assert!((stein[i] - fd_l).abs() < 1e-6);
        }
        let fd_t = fd_time_score(|x, t| m.log_density(x, t).unwrap(), &x, t, 1e-5);
        assert!((s - fd_t).abs() < 1e-7);
    }

    #[test]
    fn marginal_endpoints_are_p0_and_p1() {
        let path = ConditionalGaussianPath::vp_linear(2);
        let g = GaussianSpec::isotropic(vec![4.0, 4.0], 1.0).unwrap();
        let p1: GmmSpec = g.clone().into();
        let m = VpMarginal::new(&p1, &path).unwrap();
        let x = [1.0, 2.0];
        assert!((m.log_density(&x, 0.0).unwrap() - GaussianSpec::standard(2).log_density(&x).unwrap()).abs() < 1e-12);
        assert!((m.log_density(&x, 1.0).unwrap() - g.log_density(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sb_paths_are_rejected_by_closed_form() {
        let path = ConditionalGaussianPath::sb(1, 1.0).unwrap();
        let p1: GmmSpec = GaussianSpec::standard(1).into();
        assert!(matches!(analytic_marginal_time_score(&p1, &path, &[0.0], 0.5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dirac_prior_returns_conditional_score() {
        let path = ConditionalGaussianPath::vp_linear(2);
        let z = Conditioning::Target(vec![4.0, 4.0]);
        let zs = vec![z.clone(); 1000];
        let est = mc_marginal_time_score_from(&path, &zs, &[1.0, 0.5], 0.3).unwrap();
        let exact = path.cond_time_score(&[1.0, 0.5], &z, 0.3).unwrap();
        assert!((est.value - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        assert!(est.std_err < 1e-9);
    }

    #[test]
    fn mc_matches_analytic_on_gaussian_task() {
        let path = ConditionalGaussianPath::vp_linear(1);
        let g = GaussianSpec::isotropic(vec![4.0], 1.0).unwrap();
        let p1: GmmSpec = g.clone().into();
        let p0 = StandardNormalSampler { dim: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(x, t) in &[(2.0, 0.5), (0.0, 0.2), (3.5, 0.8)] {
            let est = mc_marginal_time_score(&path, Endpoints { p0: &p0, p1: &g }, &[x], t, 100_000, &mut rng).unwrap();
            let exact = analytic_marginal_time_score(&p1, &path, &[x], t).unwrap();
            assert!((est.value - exact).abs() < 3.0 * est.std_err, "x={x} t={t}: {} vs {exact} (se {})", est.value, est.std_err);
            assert!(!est.low_ess);
        }
    }

    #[test]
    fn mc_score_matches_mc_density_difference_on_sb_gmm() {
        let path = ConditionalGaussianPath::sb(1, 1.0).unwrap();
        let p0 = bimodal_gmm(1, 2.0, 1.0).unwrap();
        let p1 = bimodal_gmm(1, -2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<Conditioning> = (0..200_000).map(|_| path.sample_conditioning(Endpoints { p0: &p0, p1: &p1 }, &mut rng)).collect();
        for &(x, t) in &[(0.0, 0.5), (1.0, 0.3), (-1.5, 0.7)] {
            let est = mc_marginal_time_score_from(&path, &zs, &[x], t).unwrap();
            // common draws on both sides make the density difference low-variance
            let h = 1e-4;
            let fd = fd_time_score(|x, t| mc_marginal_log_density_from(&path, &zs, x, t).unwrap(), &[x], t, h);
            assert!((est.value - fd).abs() < 3.0 * est.std_err + 1e-4, "x={x} t={t}: {} vs {fd}", est.value);
        }
    }

    #[test]
    fn lemma1_examples() {
        assert_eq!(lemma1_variance(0.0, 0.0, 1.0, 4), 0.0);
        assert_eq!(lemma1_variance(1.0, 0.0, 1.0, 3), 6.0);
    }

    #[test]
    fn lemma1_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let mean = vec![0.5, -1.0, 0.2];
        let g = GaussianSpec::new(mean, Covariance::Diagonal(vec![0.5, 1.5, 1.0])).unwrap();
        let (a, b) = (0.7, -1.3);
        let n = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e = standard_normal_vec(d, &mut rng);
            let x = g.sample(&mut rng);
            let v = a * e.iter().map(|v| v * v).sum::<f64>() + b * e.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
            s1 += v;
            s2 += v * v;
        }
        let var = s2 / n as f64 - (s1 / n as f64).powi(2);
        let exact = lemma1_variance(a, b, g.time_norm_c(), d);
        assert!((var / exact - 1.0).abs() < 0.02, "{var} vs {exact}");
    }

    #[test]
    fn lemma1_reproduces_time_normalisation() {
        let path = ConditionalGaussianPath::vp_linear(1);
        for &c in &[0.5, 1.0, 17.0] {
            for &t in &[0.05f64, 0.3, 0.7, 0.95] {
                let k = 1.0 - t * t;
                let a = -t / k;
                let b = 1.0 / k.sqrt();
                let v = lemma1_variance(a, b, c, 1);
                assert!((1.0 / lambda_time(&path, t, c) - v).abs() < 1e-10 * v);
            }
        }
    }

    #[test]
    fn fd_is_exact_on_quadratics_and_second_order() {
        let f = |_: &[f64], t: f64| 3.0 * t * t - 2.0 * t + 1.0;
        assert!((fd_time_score(f, &[], 0.4, 1e-3) - (2.4 - 2.0)).abs() < 1e-10);
        let g = |_: &[f64], t: f64| t.sin();
        let e1 = (fd_time_score(g, &[], 0.7, 1e-2) - 0.7f64.cos()).abs();
        let e2 = (fd_time_score(g, &[], 0.7, 5e-3) - 0.7f64.cos()).abs();
        assert!((e1 / e2 - 4.0).abs() < 0.05);
    }

    #[test]
    fn bimodal_gmm_has_unit_variance() {
        for &k in &[0.0, 0.5, 1.0, 2.0] {
            let g = bimodal_gmm(1, 2.0, k).unwrap();
            let sigma2: f64 = 4.0 / (4.0 + k * k);
            let half = 0.5 * k * sigma2.sqrt();
            // equal-weight mixture variance: component variance plus squared half-gap
            let var = sigma2 + half * half;
            assert!((var - 1.0).abs() < 1e-14);
            assert!((g.time_norm_c() - (1.0 + 4.0)).abs() < 1e-12);
        }
    }
    #[test]
    fn bridge_marginal_matches_finite_difference_and_endpoints() {
        let p0 = bimodal_gmm(3, 2.0, 1.0).unwrap();
        let p1 = bimodal_gmm(3, -2.0, 1.0).unwrap();
        let path = ConditionalGaussianPath::sb(3, 1.0).unwrap();
        let m = SbMarginal::new(&p0, &p1, &path).unwrap();
        let x = [0.3, -0.5, 1.1];
        for &t in &[0.1, 0.4, 0.8] {
            let fd = fd_time_score(|x, t| m.log_density(x, t).unwrap(), &x, t, 1e-5);
            assert!((fd - m.time_score(&x, t).unwrap()).abs() < 1e-6);
        }
        assert!((m.log_density(&x, 0.0).unwrap() - p0.log_density(&x).unwrap()).abs() < 1e-12);
        assert!((m.log_density(&x, 1.0).unwrap() - p1.log_density(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bridge_marginal_matches_monte_carlo_posterior() {
        let p0 = bimodal_gmm(2, 2.0, 1.0).unwrap();
        let p1 = bimodal_gmm(2, -2.0, 1.0).unwrap();
        let path = ConditionalGaussianPath::sb(2, 1.0).unwrap();
        let m = SbMarginal::new(&p0, &p1, &path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for &(x, t) in &[([0.5, 0.0], 0.3), ([-1.0, -0.5], 0.7)] {
            let est = mc_marginal_time_score(&path, Endpoints { p0: &p0, p1: &p1 }, &x, t, 200_000, &mut rng).unwrap();
            let exact = m.time_score(&x, t).unwrap();
            assert!((est.value - exact).abs() < 4.0 * est.std_err, "{} vs {exact} +- {}", est.value, est.std_err);
        }
    }
}
