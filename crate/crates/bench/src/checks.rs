//! Fast invariant checks behind the `check` verb. Each returns a measured
//! statistic next to its threshold so failures are diagnosable from the
//! summary alone.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use timescore::losses::{loss_ctsm, loss_tsm_with_coeff, sample_matrix, train, Batch, Objective, TrainConfig, TSM_LAMBDA_DOT_COEFF};
use timescore::nn::ScoreNet;
use timescore::oracle::{lemma1_variance, mc_posterior_mean_from, Covariance, GaussianSpec, GmmSpec, VpMarginal};
use timescore::paths::{Conditioning, ConditionalGaussianPath, EndpointSampler, Endpoints, StandardNormalSampler, EPS_TIME};
use timescore::ratio::{
    annealed_hmc_sample, gauss_legendre_on, integrate_adaptive, log_ratio_riemann, stein_score_via_integral, standard_normal_log_density, HmcConfig,
    Integrator,
};
use timescore::weighting::{importance_sample_t, lambda_time, WeightScheme, DEFAULT_IS_T1};

use crate::config::Inject;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, statistic: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: statistic < threshold, statistic, threshold, detail }
    }

    fn above(name: &str, statistic: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: statistic > threshold, statistic, threshold, detail }
    }
}

/// The Gaussian task `p0 = N(0, I)`, `p1 = N(4 * 1, I)` on the linear VP path.
fn gaussian_task(d: usize) -> (ConditionalGaussianPath, GaussianSpec, VpMarginal) {
    let path = ConditionalGaussianPath::vp_linear(d);
    let p1 = GaussianSpec::isotropic(vec![4.0; d], 1.0).unwrap();
    let m = VpMarginal::new(&GmmSpec::from(p1.clone()), &path).unwrap();
    (path, p1, m)
}

/// Monte-Carlo posterior mean of the conditional time score against the
/// closed-form marginal score, on a 10 x 10 grid of `(x, t)` in the bulk of
/// `p_t = N(4t, I)`, for `D = 1` and `D = 2`.
pub fn mixture_identity(inject: Inject, seed: u64) -> Result<CheckResult> {
    let n_mc = 100_000;
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    let mut low_ess = 0;
    for d in [1usize, 2] {
        let (path, p1, exact) = gaussian_task(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + d as u64);
        let p0 = StandardNormalSampler { dim: d };
        let ends = Endpoints { p0: &p0, p1: &p1 };
        let zs: Vec<Conditioning> = (0..n_mc).map(|_| path.sample_conditioning(ends, &mut rng)).collect();
        for i in 0..10 {
            let t = 0.05 + 0.1 * i as f64;
            for j in 0..10 {
                let u = -2.0 + 4.0 * j as f64 / 9.0;
                let x: Vec<f64> = (0..d).map(|k| 4.0 * t + u * if k == 0 { 1.0 } else { -0.5 }).collect();
                let est = mc_posterior_mean_from(&path, &zs, &x, t, |eps, z| {
                    let s = path.time_score_from_eps(eps, z, t);
                    if inject == Inject::SignFlip {
                        -s
                    } else {
                        s
                    }
                })?;
                low_ess += est.low_ess as usize;
                let z = (est.value - exact.time_score(&x, t)?).abs() / est.std_err;
                if z > worst {
                    worst = z;
                    at = format!("D={d} t={t:.2} x={x:?}");
                }
            }
        }
    }
    Ok(CheckResult::below("mixture_identity", worst, 3.0, format!("largest |MC - exact| / SE at {at}; {low_ess} low-ESS points")))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64 + if i == j { 0.2 } else { 0.0 };
        }
    }
    s
}

/// Variance of `a |eps|^2 + b eps^T x` against `2 a^2 D + b^2 c D` over 20
/// random tuples, and the time-normalisation weight against the same
/// expression with the path's own `a` and `b`.
pub fn lemma1(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..=10usize);
        let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let a = sign(&mut rng) * rng.random_range(0.2..2.0);
        let b = sign(&mut rng) * rng.random_range(0.2..2.0);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cov = random_spd(d, &mut rng);
        let tr: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let c = (tr + mean.iter().map(|m| m * m).sum::<f64>()) / d as f64;
        let x_dist = GaussianSpec::new(mean, Covariance::Full(cov))?;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = x_dist.sample(&mut rng);
            let eps = timescore::paths::standard_normal_vec(d, &mut rng);
            let v = a * eps.iter().map(|e| e * e).sum::<f64>() + b * eps.iter().zip(&x).map(|(e, x)| e * x).sum::<f64>();
            s1 += v;
            s2 += v * v;
        }
        let m = s1 / n as f64;
        let var = (s2 / n as f64 - m * m) * n as f64 / (n - 1) as f64;
        let expected = lemma1_variance(a, b, c, d);
        worst = worst.max((var - expected).abs() / expected);
    }
    let mc = CheckResult::below("lemma1_variance", worst, 0.02, "largest relative error over 20 tuples".into());

    let mut worst_w: f64 = 0.0;
    for c in [0.5, 1.0, 3.0, 17.0] {
        for i in 1..20 {
            let t = i as f64 / 20.0;
            let vp = ConditionalGaussianPath::vp_linear(1);
            // VP: a = -alpha alpha' / k, b = alpha' / sqrt(k), u = z
            let k = 1.0 - t * t;
            let (a, b) = (-t / k, 1.0 / k.sqrt());
            let want = lemma1_variance(a, b, c, 1);
            worst_w = worst_w.max((1.0 / lambda_time(&vp, t, c) - want).abs() / want);
            // bridge with unit noise: a = k'/(2k), b = 1/sqrt(k), u = x1 - x0
            let sb = ConditionalGaussianPath::sb(1, 1.0)?;
            let k = t * (1.0 - t);
            let (a, b) = ((1.0 - 2.0 * t) / (2.0 * k), 1.0 / k.sqrt());
            let want = lemma1_variance(a, b, c, 1);
            worst_w = worst_w.max((1.0 / lambda_time(&sb, t, c) - want).abs() / want);
        }
    }
    let weight = CheckResult::below("lemma1_time_weight", worst_w, 1e-10, "largest relative gap of 1/lambda_time".into());
    Ok(vec![mc, weight])
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity of the integration-by-parts and conditional gradients
/// on one shared batch of 10^5 samples, at a briefly trained net on the 1D
/// Gaussian task.
pub fn gradient_equivalence(inject: Inject, seed: u64) -> Result<CheckResult> {
    gradient_cosine(inject, seed, GRAD_CHECK_JITTER)
}

/// Gradient check at `GRAD_CHECK_DRAWS` points, each the trained parameters
/// plus `jitter * N(0, 1)` noise per coordinate, reporting the smallest
/// cosine. At the optimum itself the expected gradient vanishes and the
/// cosine measures only sampling noise.
pub fn gradient_cosine(inject: Inject, seed: u64, jitter: f64) -> Result<CheckResult> {
    let (path, p1, _) = gaussian_task(1);
    let p0 = StandardNormalSampler { dim: 1 };
    let ends = Endpoints { p0: &p0, p1: &p1 };
    let scheme = WeightScheme::TimeNorm { c: 1.0 };
    let net = ScoreNet::new(1, &[32, 32], 1, seed)?;
    let tc = TrainConfig { n_iters: GRAD_CHECK_ITERS, seed, ..Default::default() };
    let trained = train(net, path, ends, Objective::Ctsm, scheme, &tc, None)?.last;

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = 100_000;
    let batch = Batch::draw(path, ends, &scheme, n, &mut rng)?;
    let x0 = sample_matrix(&p0, n, &mut rng);
    let x1 = sample_matrix(&p1, n, &mut rng);
    let coeff = if inject == Inject::LambdaDotCoeff1 { 1.0 } else { TSM_LAMBDA_DOT_COEFF };
    let mut cosines = Vec::with_capacity(GRAD_CHECK_DRAWS);
    for _ in 0..GRAD_CHECK_DRAWS {
        let mut net = trained.clone();
        let noise = sample_matrix(&StandardNormalSampler { dim: net.n_params() }, 1, &mut rng);
        for (p, z) in net.params_mut().iter_mut().zip(noise.iter()) {
            *p += jitter * z;
        }
        let tsm = loss_tsm_with_coeff(&net, &batch, x0.view(), x1.view(), &scheme, coeff)?;
        let ctsm = loss_ctsm(&net, &batch, &scheme)?;
        cosines.push(cosine(&tsm.grad, &ctsm.grad));
    }
    let worst = cosines.iter().cloned().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = cosines.iter().map(|c| format!("{c:.4}")).collect();
    Ok(CheckResult::above(
        "tsm_ctsm_gradient_cosine",
        worst,
        0.99,
        format!("lambda' coefficient {coeff}, jitter {jitter}, cosines [{}]", shown.join(", ")),
    ))
}

/// Perturbed parameter points per gradient check.
pub const GRAD_CHECK_DRAWS: usize = 4;

/// Training steps before the gradient comparison.
pub const GRAD_CHECK_ITERS: usize = 500;

/// Standard deviation of the parameter perturbation around the trained net.
pub const GRAD_CHECK_JITTER: f64 = 0.1;

/// Fitted log-log slope of the left Riemann error against `K`, using the
/// exact score of the 2D Gaussian task.
pub fn riemann_slope() -> Result<CheckResult> {
    let (_, _, exact) = gaussian_task(2);
    let x = [1.0, 2.5];
    let reference = integrate_adaptive(
        |t| Ok(vec![timescore::ratio::TimeScore::time_score(&exact, &x, t)?]),
        EPS_TIME,
        1.0 - EPS_TIME,
        1e-12,
        1e-12,
    )?
    .values[0];
    let ks = [10usize, 20, 40, 80, 160];
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .map(|&k| Ok(((k as f64).ln(), (log_ratio_riemann(&exact, &x, k)?.log_ratio - reference).abs().ln())))
        .collect::<Result<_>>()?;
    let slope = fit_slope(&pts);
    Ok(CheckResult::below("riemann_slope", (slope + 1.0).abs(), 0.15, format!("fitted slope {slope:.4}")))
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Kolmogorov-Smirnov distance between 10^6 inverse-CDF draws and the CDF
/// obtained by quadrature of `(1 + t^2) / (1 - t^2)^2` on `[0, t1]`.
pub fn importance_sampler(seed: u64) -> Result<CheckResult> {
    let t1 = DEFAULT_IS_T1;
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts: Vec<f64> = (0..n).map(|_| importance_sample_t(t1, rng.random::<f64>()) * t1 / (1.0 - EPS_TIME)).collect();
    ts.sort_by(f64::total_cmp);
    let density = |t: f64| (1.0 + t * t) / ((1.0 - t * t) * (1.0 - t * t));
    let mass = |hi: f64| gauss_legendre_on(24, 0.0, hi).iter().map(|(t, w)| w * density(*t)).sum::<f64>();
    let total = mass(t1);
    let mut ks: f64 = 0.0;
    for (i, &t) in ts.iter().enumerate() {
        let f = mass(t) / total;
        ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
    }
    Ok(CheckResult::below("importance_sampler_ks", ks, 0.005, format!("{n} draws, t1 = {t1}")))
}

fn neg_x(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

/// Stein scores of `p1` from integrated time-score gradients on a 5 x 5
/// grid, against `-(x - 4 * 1)`.
pub fn stein_reconstruction() -> Result<CheckResult> {
    let (_, _, exact) = gaussian_task(2);
    let grid = [1.0, 2.5, 4.0, 5.5, 7.0];
    let mut worst: f64 = 0.0;
    for &a in &grid {
        for &b in &grid {
            let x = [a, b];
            let g = stein_score_via_integral(&exact, &neg_x, &x, 1.0, Integrator::GaussLegendre { n: 16 })?;
            for (gi, xi) in g.iter().zip(&x) {
                worst = worst.max((gi + (xi - 4.0)).abs());
            }
        }
    }
    Ok(CheckResult::below("stein_reconstruction", worst, 1e-2, "max abs error on a 5 x 5 grid".into()))
}

/// Annealed HMC on the 2D Gaussian task: sample mean within 0.1 of
/// `(4, 4)` and covariance within 0.15 of the identity, from 500 chains.
pub fn hmc_moments(seed: u64) -> Result<Vec<CheckResult>> {
    let (_, _, exact) = gaussian_task(2);
    let p0 = StandardNormalSampler { dim: 2 };
    let cfg = HmcConfig { n_chains: 500, quad_nodes: 4, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = annealed_hmc_sample(&exact, &p0, &standard_normal_log_density, &neg_x, &cfg, &mut rng)?;
    let (mean_err, cov_err) = moment_errors(&r.samples, &[4.0, 4.0]);
    let detail = format!("{} warnings", r.warnings.len());
    Ok(vec![
        CheckResult::below("hmc_mean", mean_err, 0.1, detail.clone()),
        CheckResult::below("hmc_covariance", cov_err, 0.15, detail),
    ])
}

fn moment_errors(xs: &Array2<f64>, mean: &[f64]) -> (f64, f64) {
    let (n, d) = xs.dim();
    let mu: Vec<f64> = (0..d).map(|j| xs.column(j).sum() / n as f64).collect();
    let mean_err = mu.iter().zip(mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut cov_err: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let c = (0..n).map(|r| (xs[[r, i]] - mu[i]) * (xs[[r, j]] - mu[j])).sum::<f64>() / (n - 1) as f64;
            cov_err = cov_err.max((c - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    (mean_err, cov_err)
}

fn rel_gap(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Finite-difference checks of every differentiation mode on 100 random
/// nets. Returns the fraction of nets that failed any check.
pub fn differentiation(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..100 {
        let dim = rng.random_range(1..=4usize);
        let hidden: Vec<usize> = (0..rng.random_range(1..=3usize)).map(|_| rng.random_range(2..=12usize)).collect();
        let n_out = rng.random_range(1..=3usize);
        let net = ScoreNet::new(dim, &hidden, n_out, rng.random())?;
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = rng.random_range(0.05..0.95);
        if let Some(why) = differentiation_case(&net, &x, t, &mut rng)? {
            failures.push(format!("case {case}: {why}"));
        }
    }
    let detail = failures.first().cloned().unwrap_or_else(|| "all 100 nets agree".into());
    Ok(CheckResult::below("differentiation", failures.len() as f64, 0.5, detail))
}

fn differentiation_case(net: &ScoreNet, x: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let n_out = net.n_out();
    let xs = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let up: Vec<f64> = (0..n_out).map(|k| 1.0 + k as f64 * 0.5).collect();
    let dot = |v: &[f64]| v.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
    let g = net.grad_params(x, t, &up)?;
    let (_, _, gd) = net.dt_forward_backward(xs.view(), &[t], |v, _| (Array2::zeros(v.raw_dim()), Array2::from_shape_vec(v.raw_dim(), up.clone()).unwrap()))?;
    let h = 1e-6;
    for _ in 0..10 {
        let i = rng.random_range(0..net.n_params());
        let mut p = net.clone();
        p.params_mut()[i] += h;
        let mut m = net.clone();
        m.params_mut()[i] -= h;
        let fd = (dot(&p.forward(x, t)?) - dot(&m.forward(x, t)?)) / (2.0 * h);
        if rel_gap(g[i], fd, 1e-4) > 1e-4 {
            return Ok(Some(format!("grad_params[{i}] {} vs {fd}", g[i])));
        }
        let fdd = (dot(&p.dt_forward(x, t)?.1) - dot(&m.dt_forward(x, t)?.1)) / (2.0 * h);
        if rel_gap(gd[i], fdd, 1e-3) > 1e-3 {
            return Ok(Some(format!("nested[{i}] {} vs {fdd}", gd[i])));
        }
    }
    let (_, vd) = net.dt_forward(x, t)?;
    let ht = 1e-5;
    let vp = net.forward(x, t + ht)?;
    let vm = net.forward(x, t - ht)?;
    for k in 0..n_out {
        let fd = (vp[k] - vm[k]) / (2.0 * ht);
        if (vd[k] - fd).abs() >= 1e-6 {
            return Ok(Some(format!("dt[{k}] {} vs {fd}", vd[k])));
        }
    }
    let j = net.grad_x(x, t)?;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let p = net.forward(&xp, t)?;
        let m = net.forward(&xm, t)?;
        for k in 0..n_out {
            let fd = (p[k] - m[k]) / (2.0 * h);
            if (j[[k, i]] - fd).abs() >= 1e-5 {
                return Ok(Some(format!("grad_x[{k},{i}] {} vs {fd}", j[[k, i]])));
            }
        }
    }
    Ok(None)
}

/// Every fast check, in a fixed order.
pub fn run_all(inject: Inject, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![mixture_identity(inject, seed)?];
    out.extend(lemma1(seed)?);
    out.push(gradient_equivalence(inject, seed)?);
    out.push(riemann_slope()?);
    out.push(importance_sampler(seed)?);
    out.push(stein_reconstruction()?);
    out.extend(hmc_moments(seed)?);
    out.push(differentiation(seed)?);
    Ok(out)
}
