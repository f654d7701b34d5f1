//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are written in
//! snake case; unknown or repeated keys are rejected. Defaults depend on the
//! task, so `task` is resolved before the other keys are applied.
//!
//! | key | values | default |
//! |---|---|---|
//! | `task` | `gaussians`, `gmm`, `mi`, `check` | required |
//! | `dim` | integer | 2 / 20 / 40 / 1 |
//! | `mean_offset` | real, entry of the `p1` mean (gaussians) | 4 |
//! | `gmm_k` | real, mode distance in units of sigma (gmm) | 1 |
//! | `mi_rho` | block correlation (mi) | 0.8 |
//! | `path` | `vp`, `sb` | `vp`, or `sb` for gmm |
//! | `sb_sigma` | bridge noise scale | 1 |
//! | `objective` | `tsm`, `ctsm`, `ctsm_v` | `ctsm_v` |
//! | `scheme` | `uniform`, `stein`, `time`, `importance` | `time` |
//! | `time_c` | `1`, `real`, or a positive number | `1` |
//! | `is_t1` | truncation of the importance density | 0.9 |
//! | `lr` | learning rate | 1e-3 |
//! | `lr_grid` | `none`, `paper`, or comma-separated rates | `none` |
//! | `lr_schedule` | `constant`, `cosine` | `constant` |
//! | `batch_size`, `n_iters`, `eval_every` | integers | 128, 20000, 1000 (mi: 512, 20001, 2000) |
//! | `n_val`, `n_test` | evaluation set sizes | 10000 |
//! | `hidden` | comma-separated hidden widths | `256,256,256` |
//! | `normalize_target` | `true`, `false` | `false` |
//! | `bypass` | integrate the exact score instead of training | `false` |
//! | `queries` | CSV of query points for `ratios.csv` | built-in line |
//! | `inject` | `none`, `sign_flip`, `lambda_dot_coeff_1` (check) | `none` |
//! | `seed` | integer | 0 |
//! | `output_dir` | directory | `out` |

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use timescore::losses::{LrSchedule, Objective};
use timescore::nn::TOY_HIDDEN;
use timescore::paths::ConditionalGaussianPath;
use timescore::weighting::{WeightScheme, DEFAULT_IS_T1};

use crate::error::{BenchError, Result};

pub const GAUSSIANS_LR_GRID: [f64; 5] = [5e-4, 1e-3, 2e-3, 5e-3, 1e-2];
pub const GMM_LR_GRID: [f64; 9] = [1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2];
pub const MI_LR_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Gaussians,
    Gmm,
    Mi,
    Check,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussians" => Ok(Task::Gaussians),
            "gmm" => Ok(Task::Gmm),
            "mi" => Ok(Task::Mi),
            "check" => Ok(Task::Check),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Gaussians => "gaussians",
            Task::Gmm => "gmm",
            Task::Mi => "mi",
            Task::Check => "check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathChoice {
    Vp,
    Sb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Uniform,
    Stein,
    Time,
    Importance,
}

/// The data statistic used by time normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeC {
    /// `(tr Sigma + |mu|^2) / D` of the target endpoint.
    Real,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGrid {
    None,
    Paper,
    List(Vec<f64>),
}

/// Deliberate faults for the check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Inject {
    None,
    /// Negates the conditional time score inside the Monte-Carlo oracle.
    SignFlip,
    /// Uses coefficient 1 on the `lambda'` term of the TSM objective.
    LambdaDotCoeff1,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dim: usize,
    pub mean_offset: f64,
    pub gmm_k: f64,
    pub mi_rho: f64,
    pub path: PathChoice,
    pub sb_sigma: f64,
    pub objective: Objective,
    pub scheme: SchemeChoice,
    pub time_c: TimeC,
    pub is_t1: f64,
    pub lr: f64,
    pub lr_grid: LrGrid,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub n_iters: usize,
    pub eval_every: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub hidden: Vec<usize>,
    pub normalize_target: bool,
    pub bypass: bool,
    pub queries: Option<PathBuf>,
    pub inject: Inject,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "task",
    "dim",
    "mean_offset",
    "gmm_k",
    "mi_rho",
    "path",
    "sb_sigma",
    "objective",
    "scheme",
    "time_c",
    "is_t1",
    "lr",
    "lr_grid",
    "lr_schedule",
    "batch_size",
    "n_iters",
    "eval_every",
    "n_val",
    "n_test",
    "hidden",
    "normalize_target",
    "bypass",
    "queries",
    "inject",
    "seed",
    "output_dir",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` must be true or false, got `{v}`")),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        let mut c = Self {
            task,
            dim: 2,
            mean_offset: 4.0,
            gmm_k: 1.0,
            mi_rho: 0.8,
            path: PathChoice::Vp,
            sb_sigma: 1.0,
            objective: Objective::CtsmV,
            scheme: SchemeChoice::Time,
            time_c: TimeC::Value(1.0),
            is_t1: DEFAULT_IS_T1,
            lr: 1e-3,
            lr_grid: LrGrid::None,
            lr_schedule: LrSchedule::Constant,
            batch_size: 128,
            n_iters: 20_000,
            eval_every: 1000,
            n_val: 10_000,
            n_test: 10_000,
            hidden: TOY_HIDDEN.to_vec(),
            normalize_target: false,
            bypass: false,
            queries: None,
            inject: Inject::None,
            seed: 0,
            output_dir: PathBuf::from("out"),
        };
        match task {
            Task::Gaussians | Task::Check => {}
            Task::Gmm => {
                c.dim = 20;
                c.path = PathChoice::Sb;
            }
            Task::Mi => {
                c.dim = 40;
                c.batch_size = 512;
                c.n_iters = 20_001;
                c.eval_every = 2000;
            }
        }
        c
    }

    /// Parses the flat text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(BenchError::Config { line: i + 1, msg: format!("unknown key `{k}`") });
            }
            if !seen.insert(k.to_string()) {
                return Err(BenchError::Config { line: i + 1, msg: format!("key `{k}` given twice") });
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        let task_entry = entries
            .iter()
            .find(|e| e.1 == "task")
            .ok_or_else(|| BenchError::Config { line: 0, msg: "missing `task`".into() })?;
        let task = task_entry.2.parse().map_err(|msg| BenchError::Config { line: task_entry.0, msg })?;
        let mut cfg = Self::defaults(task);
        for (line, k, v) in &entries {
            cfg.set(k, v).map_err(|msg| BenchError::Config { line: *line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "task" => {}
            "dim" => self.dim = parse_num(key, v)?,
            "mean_offset" => self.mean_offset = parse_num(key, v)?,
            "gmm_k" => self.gmm_k = parse_num(key, v)?,
            "mi_rho" => self.mi_rho = parse_num(key, v)?,
            "path" => {
                self.path = match v {
                    "vp" => PathChoice::Vp,
                    "sb" => PathChoice::Sb,
                    _ => return Err(format!("unknown path `{v}`")),
                }
            }
            "sb_sigma" => self.sb_sigma = parse_num(key, v)?,
            "objective" => {
                self.objective = match v {
                    "tsm" => Objective::Tsm,
                    "ctsm" => Objective::Ctsm,
                    "ctsm_v" => Objective::CtsmV,
                    _ => return Err(format!("unknown objective `{v}`")),
                }
            }
            "scheme" => {
                self.scheme = match v {
                    "uniform" => SchemeChoice::Uniform,
                    "stein" => SchemeChoice::Stein,
                    "time" => SchemeChoice::Time,
                    "importance" => SchemeChoice::Importance,
                    _ => return Err(format!("unknown scheme `{v}`")),
                }
            }
            "time_c" => self.time_c = if v == "real" { TimeC::Real } else { TimeC::Value(parse_num(key, v)?) },
            "is_t1" => self.is_t1 = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_grid" => {
                self.lr_grid = match v {
                    "none" => LrGrid::None,
                    "paper" => LrGrid::Paper,
                    _ => LrGrid::List(parse_list(key, v)?),
                }
            }
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(format!("unknown lr_schedule `{v}`")),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "n_iters" => self.n_iters = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "n_val" => self.n_val = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "normalize_target" => self.normalize_target = parse_bool(key, v)?,
            "bypass" => self.bypass = parse_bool(key, v)?,
            "queries" => self.queries = Some(PathBuf::from(v)),
            "inject" => {
                self.inject = match v {
                    "none" => Inject::None,
                    "sign_flip" => Inject::SignFlip,
                    "lambda_dot_coeff_1" => Inject::LambdaDotCoeff1,
                    _ => return Err(format!("unknown injection `{v}`")),
                }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config { line: 0, msg });
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.task == Task::Mi && self.dim % 2 != 0 {
            return bad(format!("mi needs an even dim, got {}", self.dim));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.n_iters == 0 || self.eval_every == 0 {
            return bad("lr, batch_size, n_iters and eval_every must be positive".into());
        }
        if self.n_val == 0 || self.n_test == 0 {
            return bad("n_val and n_test must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.sb_sigma > 0.0) {
            return bad("sb_sigma must be positive".into());
        }
        match self.task {
            Task::Gaussians | Task::Mi if self.path != PathChoice::Vp => return bad(format!("{} runs on the vp path", self.task.name())),
            Task::Gmm if self.path != PathChoice::Sb => return bad("gmm endpoints need the sb path".into()),
            _ => {}
        }
        if self.task == Task::Mi && !(self.mi_rho.abs() < 1.0) {
            return bad("mi_rho must lie in (-1, 1)".into());
        }
        if self.gmm_k < 0.0 {
            return bad("gmm_k must be non-negative".into());
        }
        if let TimeC::Value(c) = self.time_c {
            if !(c > 0.0) {
                return bad("time_c must be positive".into());
            }
        }
        if self.normalize_target && self.objective == Objective::Tsm {
            return bad("normalize_target is not available with tsm".into());
        }
        if self.objective == Objective::Tsm && self.scheme == SchemeChoice::Importance {
            return bad("tsm needs a differentiable weight; importance sampling has none".into());
        }
        if let LrGrid::List(v) = &self.lr_grid {
            if v.is_empty() || v.iter().any(|l| !(*l > 0.0)) {
                return bad("lr_grid entries must be positive".into());
            }
        }
        Ok(())
    }

    pub fn conditional_path(&self) -> timescore::Result<ConditionalGaussianPath> {
        match self.path {
            PathChoice::Vp => Ok(ConditionalGaussianPath::vp_linear(self.dim)),
            PathChoice::Sb => ConditionalGaussianPath::sb(self.dim, self.sb_sigma),
        }
    }

    /// Resolves the weighting, with `real_c` the target endpoint statistic.
    pub fn weight_scheme(&self, real_c: f64) -> WeightScheme {
        match self.scheme {
            SchemeChoice::Uniform => WeightScheme::Uniform,
            SchemeChoice::Stein => WeightScheme::SteinNorm,
            SchemeChoice::Time => WeightScheme::TimeNorm {
                c: match self.time_c {
                    TimeC::Real => real_c,
                    TimeC::Value(c) => c,
                },
            },
            SchemeChoice::Importance => WeightScheme::ImportanceSampled { t1: self.is_t1 },
        }
    }

    /// Learning rates to try, in order.
    pub fn learning_rates(&self) -> Vec<f64> {
        match &self.lr_grid {
            LrGrid::None => vec![self.lr],
            LrGrid::Paper => match self.task {
                Task::Gaussians | Task::Check => GAUSSIANS_LR_GRID.to_vec(),
                Task::Gmm => GMM_LR_GRID.to_vec(),
                Task::Mi => MI_LR_GRID.to_vec(),
            },
            LrGrid::List(v) => v.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_task_defaults() {
        let cfg = ExperimentConfig::parse("# demo\ntask = gmm\n\nlr = 2e-3\nhidden = 32, 32\n").unwrap();
        assert_eq!(cfg.task, Task::Gmm);
        assert_eq!(cfg.path, PathChoice::Sb);
        assert_eq!(cfg.dim, 20);
        assert_eq!(cfg.lr, 2e-3);
        assert_eq!(cfg.hidden, vec![32, 32]);
    }

    #[test]
    fn task_may_appear_after_other_keys() {
        let cfg = ExperimentConfig::parse("batch_size = 64\ntask = mi\n").unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.n_iters, 20_001);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let e = ExperimentConfig::parse("task = gaussians\nlearning_rate = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(ExperimentConfig::parse("task = gaussians\nlr = 1\nlr = 2\n").is_err());
        assert!(ExperimentConfig::parse("lr = 1\n").is_err());
        assert!(ExperimentConfig::parse("task = gaussians\nlr\n").is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(ExperimentConfig::parse("task = gmm\npath = vp\n").is_err());
        assert!(ExperimentConfig::parse("task = mi\ndim = 3\n").is_err());
        assert!(ExperimentConfig::parse("task = gaussians\nobjective = tsm\nnormalize_target = true\n").is_err());
        assert!(ExperimentConfig::parse("task = gaussians\nlr = -1\n").is_err());
        assert!(ExperimentConfig::parse("task = gaussians\ntime_c = 0\n").is_err());
    }

    #[test]
    fn time_constant_and_grids() {
        let cfg = ExperimentConfig::parse("task = gaussians\ntime_c = real\nlr_grid = paper\n").unwrap();
        assert_eq!(cfg.weight_scheme(17.0), WeightScheme::TimeNorm { c: 17.0 });
        assert_eq!(cfg.learning_rates(), GAUSSIANS_LR_GRID.to_vec());
        let cfg = ExperimentConfig::parse("task = mi\nlr_grid = 1e-4, 1e-2\n").unwrap();
        assert_eq!(cfg.learning_rates(), vec![1e-4, 1e-2]);
    }
}
