//! The three desk-scale studies: distant Gaussians, bimodal mixtures and
//! mutual information between correlated Gaussian blocks.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use timescore::losses::{train, TrainConfig, TrainResult, TSM_LAMBDA_DOT_COEFF};
use timescore::mi::{block_covariance, estimate_mi, true_mi, train_mi, MiModel, MiTrainConfig};
use timescore::nn::ScoreNet;
use timescore::oracle::{bimodal_gmm, GaussianSpec, GmmSpec, SbMarginal, VpMarginal};
use timescore::paths::{ConditionalGaussianPath, EndpointSampler, Endpoints};
use timescore::ratio::{log_ratio_adaptive, log_ratio_adaptive_batch, TimeScore, DEFAULT_ATOL, DEFAULT_RTOL};

use crate::config::{ExperimentConfig, Task};
use crate::error::{BenchError, Result};

const VAL_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const QUERY_STREAM: u64 = 3;

/// One row of `trace.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub val_mse: Option<f64>,
    pub wall_ms: f64,
    /// MI runs only.
    pub mi_estimate: Option<f64>,
    pub abs_error: Option<f64>,
}

/// One row of `ratios.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRow {
    pub x: Vec<f64>,
    pub log_ratio: f64,
    pub truth: f64,
    pub n_evals: usize,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub task: Task,
    pub trace: Vec<TraceRecord>,
    pub ratios: Vec<RatioRow>,
    pub metrics: serde_json::Value,
    /// Set when a check failed or training diverged.
    pub failed: bool,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A density-ratio problem with closed-form ground truth.
pub struct DreProblem {
    pub path: ConditionalGaussianPath,
    pub p0: GmmSpec,
    pub p1: GmmSpec,
    pub oracle: Box<dyn TimeScore>,
    /// Second-moment statistic of the target endpoint.
    pub real_c: f64,
    /// Endpoints of the default query line `s * 1`.
    pub query_line: (f64, f64),
}

impl DreProblem {
    pub fn gaussians(cfg: &ExperimentConfig) -> Result<Self> {
        let d = cfg.dim;
        let path = cfg.conditional_path()?;
        let p0 = GmmSpec::from(GaussianSpec::standard(d));
        let p1 = GmmSpec::from(GaussianSpec::isotropic(vec![cfg.mean_offset; d], 1.0)?);
        let oracle = Box::new(VpMarginal::new(&p1, &path)?);
        let real_c = p1.time_norm_c();
        Ok(Self { path, p0, p1, oracle, real_c, query_line: (-2.0, cfg.mean_offset + 2.0) })
    }

    pub fn gmm(cfg: &ExperimentConfig) -> Result<Self> {
        let d = cfg.dim;
        let path = cfg.conditional_path()?;
        let p0 = bimodal_gmm(d, 2.0, cfg.gmm_k)?;
        let p1 = bimodal_gmm(d, -2.0, cfg.gmm_k)?;
        let oracle = Box::new(SbMarginal::new(&p0, &p1, &path)?);
        let real_c = p1.time_norm_c();
        Ok(Self { path, p0, p1, oracle, real_c, query_line: (-4.0, 4.0) })
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn truth(&self, x: &[f64]) -> Result<f64> {
        Ok(self.p1.log_density(x)? - self.p0.log_density(x)?)
    }

    /// Equal-weight draws from `p0` and `p1`.
    pub fn mixture_samples(&self, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let d = self.dim();
        let mut xs = Array2::zeros((n, d));
        for i in 0..n {
            let x = if rng.random_bool(0.5) { self.p0.sample(rng) } else { self.p1.sample(rng) };
            for (j, v) in x.into_iter().enumerate() {
                xs[[i, j]] = v;
            }
        }
        xs
    }

    pub fn truths(&self, xs: &Array2<f64>) -> Result<Vec<f64>> {
        xs.rows().into_iter().map(|r| self.truth(&r.to_vec())).collect()
    }
}

/// Mean squared log-ratio error of `score` on `xs`.
pub fn log_ratio_mse(score: &dyn TimeScore, xs: &Array2<f64>, truths: &[f64]) -> timescore::Result<f64> {
    let (est, _) = log_ratio_adaptive_batch(score, xs.view(), DEFAULT_RTOL, DEFAULT_ATOL)?;
    Ok(est.iter().zip(truths).map(|(e, t)| (e - t) * (e - t)).sum::<f64>() / est.len() as f64)
}

fn load_queries(path: &Path, dim: usize) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = match vals {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(BenchError::Queries(format!("row {} is not numeric", i + 1))),
        };
        if vals.len() != dim {
            return Err(BenchError::Queries(format!("row {} has {} columns, expected {dim}", i + 1, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, dim), data).unwrap())
}

fn query_points(cfg: &ExperimentConfig, line: (f64, f64)) -> Result<Array2<f64>> {
    if let Some(p) = &cfg.queries {
        return load_queries(p, cfg.dim);
    }
    let n = 21;
    Ok(Array2::from_shape_fn((n, cfg.dim), |(i, _)| line.0 + (line.1 - line.0) * i as f64 / (n - 1) as f64))
}

fn ratio_rows(score: &dyn TimeScore, qs: &Array2<f64>, truth: &dyn Fn(&[f64]) -> Result<f64>) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::with_capacity(qs.nrows());
    for q in qs.rows() {
        let x = q.to_vec();
        let est = log_ratio_adaptive(score, &x, DEFAULT_RTOL, DEFAULT_ATOL)?;
        rows.push(RatioRow { truth: truth(&x)?, log_ratio: est.log_ratio, n_evals: est.n_evals(), x });
    }
    Ok(rows)
}

pub fn run_gaussians(cfg: &ExperimentConfig) -> Result<Report> {
    run_dre(cfg, &DreProblem::gaussians(cfg)?)
}

pub fn run_gmm(cfg: &ExperimentConfig) -> Result<Report> {
    run_dre(cfg, &DreProblem::gmm(cfg)?)
}

/// Trains one network per learning rate, keeps the one with the best
/// validation error and reports its test error on fresh samples.
pub fn run_dre(cfg: &ExperimentConfig, problem: &DreProblem) -> Result<Report> {
    let val = problem.mixture_samples(cfg.n_val, &mut stream_rng(cfg.seed, VAL_STREAM));
    let val_truth = problem.truths(&val)?;
    let queries = query_points(cfg, problem.query_line)?;
    let truth = |x: &[f64]| problem.truth(x);

    if cfg.bypass {
        let test = problem.mixture_samples(cfg.n_test, &mut stream_rng(cfg.seed, TEST_STREAM));
        let test_truth = problem.truths(&test)?;
        let val_mse = log_ratio_mse(problem.oracle.as_ref(), &val, &val_truth)?;
        let test_mse = log_ratio_mse(problem.oracle.as_ref(), &test, &test_truth)?;
        let ratios = ratio_rows(problem.oracle.as_ref(), &queries, &truth)?;
        let metrics = json!({ "bypass": true, "val_mse": val_mse, "test_mse": test_mse });
        return Ok(Report { task: cfg.task, trace: Vec::new(), ratios, metrics, failed: false });
    }

    let scheme = cfg.weight_scheme(problem.real_c);
    let n_out = cfg.objective.n_out(problem.dim());
    let ends = Endpoints { p0: &problem.p0, p1: &problem.p1 };
    let mut best: Option<(f64, TrainResult)> = None;
    let mut grid = Vec::new();
    for lr in cfg.learning_rates() {
        let net = ScoreNet::new(problem.dim(), &cfg.hidden, n_out, cfg.seed)?.with_target_scale(cfg.normalize_target.then_some(problem.path));
        let tc = TrainConfig {
            lr,
            batch_size: cfg.batch_size,
            n_iters: cfg.n_iters,
            seed: cfg.seed,
            eval_every: cfg.eval_every,
            lambda_dot_coeff: TSM_LAMBDA_DOT_COEFF,
            lr_schedule: cfg.lr_schedule,
        };
        let mut eval = |n: &ScoreNet| match log_ratio_mse(n, &val, &val_truth) {
            Ok(v) => Ok(v),
            Err(e) => {
                log::warn!("validation failed: {e}");
                Ok(f64::NAN)
            }
        };
        log::info!("{}: training {} with lr {lr}", cfg.task.name(), cfg.objective.name());
        let res = train(net, problem.path, ends, cfg.objective, scheme, &tc, Some(&mut eval))?;
        let bv = res.best_val.unwrap_or(f64::INFINITY);
        grid.push(json!({
            "lr": lr,
            "best_val_mse": res.best_val,
            "best_step": res.best_step,
            "diverged": res.diverged.as_ref().map(|d| json!({ "step": d.0, "reason": d.1 })),
        }));
        if best.as_ref().is_none_or(|(b, _)| bv < *b) {
            best = Some((bv, res));
        }
    }
    let (_, res) = best.unwrap();
    let selected_lr = grid.iter().find(|g| g["best_step"] == res.best_step && g["best_val_mse"] == json!(res.best_val)).map(|g| g["lr"].clone());
    let test = problem.mixture_samples(cfg.n_test, &mut stream_rng(cfg.seed, TEST_STREAM));
    let test_truth = problem.truths(&test)?;
    let test_mse = match log_ratio_mse(&res.best, &test, &test_truth) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("test evaluation failed: {e}");
            None
        }
    };
    let ratios = ratio_rows(&res.best, &queries, &truth).unwrap_or_else(|e| {
        log::warn!("query evaluation failed: {e}");
        Vec::new()
    });
    let trace = res
        .trace
        .iter()
        .map(|r| TraceRecord { step: r.step, loss: r.loss, val_mse: r.val_mse, wall_ms: r.wall_ms, mi_estimate: None, abs_error: None })
        .collect();
    let diverged = res.diverged.as_ref().map(|d| json!({ "step": d.0, "reason": d.1 }));
    let metrics = json!({
        "bypass": false,
        "objective": cfg.objective.name(),
        "scheme": scheme,
        "selected_lr": selected_lr,
        "best_step": res.best_step,
        "best_val_mse": res.best_val,
        "test_mse": test_mse,
        "rejected_samples": res.rejected,
        "diverged": diverged,
        "lr_grid": grid,
    });
    Ok(Report { task: cfg.task, trace, ratios, metrics, failed: res.diverged.is_some() || test_mse.is_none() })
}

pub fn run_mi(cfg: &ExperimentConfig) -> Result<Report> {
    let d = cfg.dim;
    let p1 = block_covariance(d, cfg.mi_rho)?;
    let truth_mi = true_mi(d, cfg.mi_rho);
    let p0 = GaussianSpec::standard(d);
    let qs = {
        let mut rng = stream_rng(cfg.seed, QUERY_STREAM);
        match &cfg.queries {
            Some(p) => load_queries(p, d)?,
            None => timescore::losses::sample_matrix(&p1, 16, &mut rng),
        }
    };
    let truth = |x: &[f64]| -> Result<f64> { Ok(p1.log_density(x)? - p0.log_density(x)?) };

    if cfg.bypass {
        let eval = timescore::losses::sample_matrix(&p1, cfg.n_val, &mut stream_rng(cfg.seed, VAL_STREAM));
        let model = MiModel::exact(&p1);
        let est = estimate_mi(&model, eval.view())?;
        let ratios = ratio_rows(&model.score_fn(), &qs, &truth)?;
        let metrics = json!({ "bypass": true, "true_mi": truth_mi, "mi_estimate": est, "abs_error": (est - truth_mi).abs() });
        return Ok(Report { task: cfg.task, trace: Vec::new(), ratios, metrics, failed: false });
    }

    let scheme = cfg.weight_scheme(p1.time_norm_c());
    let mut best = None;
    let mut grid = Vec::new();
    for lr in cfg.learning_rates() {
        let mc = MiTrainConfig {
            lr,
            batch_size: cfg.batch_size,
            n_iters: cfg.n_iters,
            eval_every: cfg.eval_every,
            seed: cfg.seed,
            n_eval: cfg.n_val,
            lambda_dot_coeff: TSM_LAMBDA_DOT_COEFF,
        };
        log::info!("mi: training {} with lr {lr}", cfg.objective.name());
        let res = train_mi(&p1, cfg.objective, scheme, &mc, truth_mi)?;
        // selection by the final training loss, which needs no ground truth
        let final_loss = res.trace.last().map(|r| r.loss).unwrap_or(f64::INFINITY);
        let last = res.trace.last();
        grid.push(json!({
            "lr": lr,
            "final_loss": final_loss,
            "mi_estimate": last.map(|r| r.mi_estimate),
            "abs_error": last.map(|r| r.abs_error),
            "skipped_steps": res.skipped,
            "diverged": res.diverged.as_ref().map(|d| json!({ "step": d.0, "reason": d.1 })),
        }));
        let key = if res.diverged.is_some() || !final_loss.is_finite() { f64::INFINITY } else { final_loss };
        if best.as_ref().is_none_or(|(b, _, _)| key < *b) {
            best = Some((key, lr, res));
        }
    }
    let (_, lr, res) = best.unwrap();
    let last = res.trace.last().cloned();
    let ratios = ratio_rows(&res.model.score_fn(), &qs, &truth).unwrap_or_else(|e| {
        log::warn!("query evaluation failed: {e}");
        Vec::new()
    });
    let trace = res
        .trace
        .iter()
        .map(|r| TraceRecord {
            step: r.step,
            loss: r.loss,
            val_mse: None,
            wall_ms: r.wall_ms,
            mi_estimate: Some(r.mi_estimate),
            abs_error: Some(r.abs_error),
        })
        .collect();
    let metrics = json!({
        "bypass": false,
        "objective": cfg.objective.name(),
        "scheme": scheme,
        "selected_lr": lr,
        "true_mi": truth_mi,
        "mi_estimate": last.as_ref().map(|r| r.mi_estimate),
        "abs_error": last.as_ref().map(|r| r.abs_error),
        "relative_error": last.as_ref().map(|r| r.abs_error / truth_mi),
        "skipped_steps": res.skipped,
        "diverged": res.diverged.as_ref().map(|d| json!({ "step": d.0, "reason": d.1 })),
        "lr_grid": grid,
    });
    let failed = res.diverged.is_some() || last.is_none_or(|r| !r.mi_estimate.is_finite());
    Ok(Report { task: cfg.task, trace, ratios, metrics, failed })
}

/// Runs the fast check suite and reports one entry per property.
pub fn run_check(cfg: &ExperimentConfig) -> Result<Report> {
    let results = crate::checks::run_all(cfg.inject, cfg.seed)?;
    for r in &results {
        log::info!("{}: {} ({} vs {})", r.name, if r.passed { "pass" } else { "FAIL" }, r.statistic, r.threshold);
    }
    let failed = results.iter().any(|r| !r.passed);
    let metrics = json!({ "inject": cfg.inject, "passed": !failed, "checks": results });
    Ok(Report { task: cfg.task, trace: Vec::new(), ratios: Vec::new(), metrics, failed })
}

/// Dispatches on `cfg.task`.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.task {
        Task::Gaussians => run_gaussians(cfg),
        Task::Gmm => run_gmm(cfg),
        Task::Mi => run_mi(cfg),
        Task::Check => run_check(cfg),
    }
}
