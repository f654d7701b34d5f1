//! Minibatch estimators of the time-score objectives and the training loop.
//!
//! Every loss returns its value together with the gradient over the network
//! parameters. Reductions are means over the accepted samples of a batch.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{OptimState, ScoreNet};
use crate::paths::{ConditionalGaussianPath, Endpoints, PathSample};
use crate::weighting::{importance_sample_t, WeightScheme};

/// Largest fraction of degenerate samples a batch may lose before the step
/// is abandoned.
pub const MAX_REJECT_FRACTION: f64 = 0.1;

/// The coefficient in front of `lambda'(t) s(x, t)` in the
/// integration-by-parts objective.
pub const TSM_LAMBDA_DOT_COEFF: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Tsm,
    Ctsm,
    CtsmV,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Tsm => "tsm",
            Objective::Ctsm => "ctsm",
            Objective::CtsmV => "ctsm_v",
        }
    }

    /// Network output width required by the objective.
    pub fn n_out(&self, dim: usize) -> usize {
        match self {
            Objective::CtsmV => dim,
            _ => 1,
        }
    }
}

/// Samples drawn from `p(z) p(t) p_t(x | z)` along one path.
#[derive(Clone, Debug)]
pub struct Batch {
    pub path: ConditionalGaussianPath,
    pub samples: Vec<PathSample>,
}

impl Batch {
    pub fn new(path: ConditionalGaussianPath, samples: Vec<PathSample>) -> Self {
        Self { path, samples }
    }

    /// Draws `n` samples, with times from [`sample_time`].
    pub fn draw(
        path: ConditionalGaussianPath,
        endpoints: Endpoints<'_>,
        scheme: &WeightScheme,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let t = sample_time(&path, scheme, rng);
            samples.push(path.sample_path(endpoints, t, rng)?);
        }
        Ok(Self { path, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Uniform on the path's time domain, or the importance law when requested.
pub fn sample_time(path: &ConditionalGaussianPath, scheme: &WeightScheme, rng: &mut dyn RngCore) -> f64 {
    let (lo, hi) = path.time_domain();
    match *scheme {
        WeightScheme::ImportanceSampled { t1 } => {
            let u: f64 = rng.random();
            importance_sample_t(t1, u).clamp(lo, hi)
        }
        _ => lo + (hi - lo) * rng.random::<f64>(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Samples dropped because their regression target was not finite.
    pub rejected: usize,
}

fn check_rejections(rejected: usize, total: usize) -> Result<()> {
    if total == 0 || rejected as f64 > MAX_REJECT_FRACTION * total as f64 {
        return Err(Error::TooManyRejected { rejected, total });
    }
    Ok(())
}

fn check_width(net: &ScoreNet, expected: usize) -> Result<()> {
    if net.n_out() != expected {
        return Err(Error::DimensionMismatch { expected, got: net.n_out() });
    }
    Ok(())
}

/// Weighted regression `(1/B) sum_i w_i |y_i - pred_i|^2`, where
/// `pred_i = scale(t_i) * net(x_i, t_i)` and `scale` is the net's target
/// scale (one if unset). Both CTSM variants reduce to this.
pub fn loss_regression(
    net: &ScoreNet,
    xs: ArrayView2<'_, f64>,
    ts: &[f64],
    targets: ArrayView2<'_, f64>,
    weights: &[f64],
) -> Result<LossOutput> {
    let b = xs.nrows();
    if targets.nrows() != b || weights.len() != b {
        return Err(Error::DimensionMismatch { expected: b, got: targets.nrows().min(weights.len()) });
    }
    check_width(net, targets.ncols())?;
    if b == 0 {
        return Err(Error::TooManyRejected { rejected: 0, total: 0 });
    }
    let scales: Vec<f64> = ts.iter().map(|&t| net.output_scale(t)).collect();
    let mut loss = 0.0;
    let (_, grad) = net.forward_backward(xs, ts, |out| {
        let mut up = Array2::zeros(out.raw_dim());
        for i in 0..b {
            for j in 0..out.ncols() {
                let r = targets[[i, j]] - scales[i] * out[[i, j]];
                loss += weights[i] * r * r;
                up[[i, j]] = -2.0 * weights[i] * r * scales[i] / b as f64;
            }
        }
        up
    })?;
    Ok(LossOutput { loss: loss / b as f64, grad, rejected: 0 })
}

fn regression_inputs<F>(net: &ScoreNet, batch: &Batch, scheme: &WeightScheme, width: usize, target: F) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>, Vec<f64>, usize)>
where
    F: Fn(&PathSample) -> Vec<f64>,
{
    let d = batch.path.dim();
    if net.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: net.dim() });
    }
    let mut xs = Vec::with_capacity(batch.len() * d);
    let mut ys = Vec::with_capacity(batch.len() * width);
    let mut ts = Vec::with_capacity(batch.len());
    let mut ws = Vec::with_capacity(batch.len());
    let mut rejected = 0;
    for s in &batch.samples {
        let y = target(s);
        let w = scheme.lambda(&batch.path, s.t);
        if !w.is_finite() || y.iter().any(|v| !v.is_finite()) || s.x.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        xs.extend_from_slice(&s.x);
        ys.extend(y);
        ts.push(s.t);
        ws.push(w);
    }
    check_rejections(rejected, batch.len())?;
    let n = ts.len();
    Ok((
        Array2::from_shape_vec((n, d), xs).unwrap(),
        ts,
        Array2::from_shape_vec((n, width), ys).unwrap(),
        ws,
        rejected,
    ))
}

/// Conditional time score matching with a scalar network.
pub fn loss_ctsm(net: &ScoreNet, batch: &Batch, scheme: &WeightScheme) -> Result<LossOutput> {
    check_width(net, 1)?;
    let path = batch.path;
    let (xs, ts, ys, ws, rejected) = regression_inputs(net, batch, scheme, 1, |s| vec![s.time_score(&path)])?;
    let mut out = loss_regression(net, xs.view(), &ts, ys.view(), &ws)?;
    out.rejected = rejected;
    Ok(out)
}

/// Vectorised conditional time score matching with a `D`-output network.
pub fn loss_ctsm_v(net: &ScoreNet, batch: &Batch, scheme: &WeightScheme) -> Result<LossOutput> {
    let d = batch.path.dim();
    check_width(net, d)?;
    let path = batch.path;
    let (xs, ts, ys, ws, rejected) = regression_inputs(net, batch, scheme, d, |s| s.time_score_vec(&path))?;
    let mut out = loss_regression(net, xs.view(), &ts, ys.view(), &ws)?;
    out.rejected = rejected;
    Ok(out)
}

/// Time score matching in its integration-by-parts form, with the standard
/// `lambda'` coefficient.
pub fn loss_tsm(
    net: &ScoreNet,
    interior: &Batch,
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
    scheme: &WeightScheme,
) -> Result<LossOutput> {
    loss_tsm_with_coeff(net, interior, x0, x1, scheme, TSM_LAMBDA_DOT_COEFF)
}

/// Integration-by-parts objective on `t ~ U[lo, hi]`:
///
/// ```text
/// 2 lambda(lo) E0[s(x, lo)] / (hi - lo) - 2 lambda(hi) E1[s(x, hi)] / (hi - lo)
///   + E[2 lambda ds/dt + coeff * lambda' s + lambda s^2]
/// ```
///
/// which equals the weighted regression objective up to a constant when
/// `coeff = 2`. Other coefficients are only useful for regression tests.
pub fn loss_tsm_with_coeff(
    net: &ScoreNet,
    interior: &Batch,
    x0: ArrayView2<'_, f64>,
    x1: ArrayView2<'_, f64>,
    scheme: &WeightScheme,
    lambda_dot_coeff: f64,
) -> Result<LossOutput> {
    check_width(net, 1)?;
    if net.target_scale().is_some() {
        return Err(Error::Unsupported("target scaling with the integration-by-parts objective".into()));
    }
    let path = interior.path;
    let (lo, hi) = path.time_domain();
    let span = hi - lo;

    let mut xs = Vec::with_capacity(interior.len() * path.dim());
    let mut ts = Vec::with_capacity(interior.len());
    let mut lam = Vec::with_capacity(interior.len());
    let mut lam_dot = Vec::with_capacity(interior.len());
    let mut rejected = 0;
    for s in &interior.samples {
        let l = scheme.lambda(&path, s.t);
        let ld = scheme.lambda_dot(&path, s.t)?;
        if !l.is_finite() || !ld.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        xs.extend_from_slice(&s.x);
        ts.push(s.t);
        lam.push(l);
        lam_dot.push(ld);
    }
    check_rejections(rejected, interior.len())?;
    let n = ts.len();
    let xs = Array2::from_shape_vec((n, path.dim()), xs).unwrap();

    let mut loss = 0.0;
    let (_, _, mut grad) = net.dt_forward_backward(xs.view(), &ts, |v, vd| {
        let mut up = Array2::zeros(v.raw_dim());
        let mut up_t = Array2::zeros(v.raw_dim());
        for i in 0..n {
            let s = v[[i, 0]];
            let sd = vd[[i, 0]];
            loss += 2.0 * lam[i] * sd + lambda_dot_coeff * lam_dot[i] * s + lam[i] * s * s;
            up[[i, 0]] = (lambda_dot_coeff * lam_dot[i] + 2.0 * lam[i] * s) / n as f64;
            up_t[[i, 0]] = 2.0 * lam[i] / n as f64;
        }
        (up, up_t)
    })?;
    loss /= n as f64;

    for (xb, t, sign) in [(x0, lo, 1.0), (x1, hi, -1.0)] {
        if xb.nrows() == 0 {
            continue;
        }
        let coeff = sign * 2.0 * scheme.lambda(&path, t) / span;
        if coeff == 0.0 {
            continue;
        }
        let tb = vec![t; xb.nrows()];
        let m = xb.nrows() as f64;
        let mut term = 0.0;
        let (_, g) = net.forward_backward(xb, &tb, |out| {
            term = out.sum() / m;
            Array2::from_elem(out.raw_dim(), coeff / m)
        })?;
        loss += coeff * term;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(LossOutput { loss, grad, rejected })
}

/// Time score predicted by a trained net: the single output, or the sum of
/// the entries for a vectorised net, in time-score units.
pub fn predict_time_score(net: &ScoreNet, x: &[f64], t: f64) -> Result<f64> {
    let out = net.forward(x, t)?;
    Ok(out.iter().sum::<f64>() * net.output_scale(t))
}

pub fn predict_time_score_batch(net: &ScoreNet, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Vec<f64>> {
    let out = net.forward_batch(xs, ts)?;
    Ok(out.rows().into_iter().zip(ts).map(|(r, &t)| r.sum() * net.output_scale(t)).collect())
}

/// Learning-rate policy over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    /// Learning rate for 1-based `step` out of `n_iters`.
    pub fn lr_at(&self, lr: f64, step: usize, n_iters: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = (step - 1) as f64 / n_iters.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Coefficient of the `lambda'` term in the integration-by-parts
    /// objective; anything but 2 is a deliberately wrong objective.
    pub lambda_dot_coeff: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            n_iters: 20_000,
            seed: 0,
            eval_every: 1000,
            lambda_dot_coeff: TSM_LAMBDA_DOT_COEFF,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_mse: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Parameters at the evaluation with the lowest validation error, or the
    /// final parameters when no evaluation callback was supplied.
    pub best: ScoreNet,
    pub last: ScoreNet,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub trace: Vec<TraceRow>,
    /// Training loss of every completed step.
    pub losses: Vec<f64>,
    pub rejected: usize,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub diverged: Option<(usize, String)>,
}

/// Adam training loop. `eval` maps the current net to a validation error and
/// is called every `eval_every` steps and after the last step.
pub fn train(
    net: ScoreNet,
    path: ConditionalGaussianPath,
    endpoints: Endpoints<'_>,
    objective: Objective,
    scheme: WeightScheme,
    config: &TrainConfig,
    mut eval: Option<&mut dyn FnMut(&ScoreNet) -> Result<f64>>,
) -> Result<TrainResult> {
    scheme.validate()?;
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be positive".into()));
    }
    check_width(&net, objective.n_out(path.dim()))?;
    if objective == Objective::Tsm {
        let (lo, _) = path.time_domain();
        scheme.lambda_dot(&path, lo)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimState::new(net.n_params(), config.lr);
    let start = Instant::now();
    let mut net = net;
    let mut best = net.clone();
    let mut best_val: Option<f64> = None;
    let mut best_step = 0;
    let mut trace = Vec::new();
    let mut losses = Vec::with_capacity(config.n_iters);
    let mut rejected = 0;
    let mut diverged = None;
    let mut since_last = (0.0, 0usize);
    let eval_every = config.eval_every.max(1);

    for step in 1..=config.n_iters {
        let batch = Batch::draw(path, endpoints, &scheme, config.batch_size, &mut rng)?;
        let result = match objective {
            Objective::Ctsm => loss_ctsm(&net, &batch, &scheme),
            Objective::CtsmV => loss_ctsm_v(&net, &batch, &scheme),
            Objective::Tsm => {
                let x0 = draw_matrix(endpoints.p0.dim(), config.batch_size, |r| endpoints.p0.sample(r), &mut rng);
                let x1 = draw_matrix(endpoints.p1.dim(), config.batch_size, |r| endpoints.p1.sample(r), &mut rng);
                loss_tsm_with_coeff(&net, &batch, x0.view(), x1.view(), &scheme, config.lambda_dot_coeff)
            }
        };
        let out = match result {
            Ok(out) => out,
            Err(Error::TooManyRejected { rejected: r, .. }) => {
                rejected += r;
                log::warn!("step {step}: batch rejected ({r} degenerate samples)");
                continue;
            }
            Err(e) => return Err(e),
        };
        rejected += out.rejected;
        if !out.loss.is_finite() {
            diverged = Some((step, format!("loss {}", out.loss)));
            break;
        }
        opt.lr = config.lr_schedule.lr_at(config.lr, step, config.n_iters);
        if let Err(e) = opt.adam_step(net.params_mut(), &out.grad) {
            diverged = Some((step, e.to_string()));
            break;
        }
        losses.push(out.loss);
        since_last.0 += out.loss;
        since_last.1 += 1;

        if step % eval_every == 0 || step == config.n_iters {
            let val = match eval.as_deref_mut() {
                Some(f) => Some(f(&net)?),
                None => None,
            };
            trace.push(TraceRow {
                step,
                loss: since_last.0 / since_last.1.max(1) as f64,
                val_mse: val,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            log::info!("step {step}: loss {:.6}, val {:?}", trace.last().unwrap().loss, val);
            since_last = (0.0, 0);
            match val {
                Some(v) if v.is_finite() && best_val.is_none_or(|b| v < b) => {
                    best_val = Some(v);
                    best_step = step;
                    best = net.clone();
                }
                Some(_) => {}
                None => {
                    best_step = step;
                    best = net.clone();
                }
            }
        }
    }
    if diverged.is_some() && best_step == 0 {
        best = net.clone();
    }
    Ok(TrainResult { best, last: net, best_step, best_val, trace, losses, rejected, diverged })
}

fn draw_matrix<F>(dim: usize, n: usize, mut f: F, rng: &mut dyn RngCore) -> Array2<f64>
where
    F: FnMut(&mut dyn RngCore) -> Vec<f64>,
{
    let mut data = Vec::with_capacity(dim * n);
    for _ in 0..n {
        data.extend(f(rng));
    }
    Array2::from_shape_vec((n, dim), data).unwrap()
}

/// Draws `n` i.i.d. rows from a sampler.
pub fn sample_matrix(sampler: &dyn crate::paths::EndpointSampler, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
    draw_matrix(sampler.dim(), n, |r| sampler.sample(r), rng)
}
