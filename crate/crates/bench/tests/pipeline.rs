use std::fs;
use std::process::Command;

use timescore::losses::Objective;
use timescore_bench::checks::{gradient_equivalence, mixture_identity};
use timescore_bench::config::{ExperimentConfig, Inject, Task};
use timescore_bench::output::write_all;
use timescore_bench::tasks::{run, run_mi, Report};

fn small(task: Task, extra: &str) -> ExperimentConfig {
    let text = format!("task = {}\nhidden = 16, 16\nn_iters = 300\neval_every = 100\nn_val = 400\nn_test = 400\n{extra}", task.name());
    ExperimentConfig::parse(&text).unwrap()
}

fn metric(r: &Report, key: &str) -> f64 {
    r.metrics[key].as_f64().unwrap()
}

#[test]
fn gaussian_bypass_integrates_to_the_exact_ratio() {
    let mut cfg = ExperimentConfig::defaults(Task::Gaussians);
    cfg.bypass = true;
    let r = run(&cfg).unwrap();
    assert!(metric(&r, "test_mse") < 1e-4, "{}", r.metrics);
    assert!(metric(&r, "val_mse") < 1e-4);
    assert_eq!(r.ratios.len(), 21);
    for row in &r.ratios {
        assert!((row.log_ratio - row.truth).abs() < 1e-3);
    }
}

#[test]
fn degenerate_mixture_bypass_is_linear_and_exact() {
    let cfg = ExperimentConfig::parse("task = gmm\ngmm_k = 0\nbypass = true\nn_val = 2000\nn_test = 2000\n").unwrap();
    let r = run(&cfg).unwrap();
    assert!(metric(&r, "test_mse") < 1e-4, "{}", r.metrics);
    // single Gaussians N(-2, I) and N(2, I): log ratio = -4 sum(x)
    for row in &r.ratios {
        let lin = -4.0 * row.x.iter().sum::<f64>();
        assert!((row.truth - lin).abs() < 1e-9);
    }
}

#[test]
fn mi_bypass_recovers_the_log_det() {
    let mut cfg = ExperimentConfig::defaults(Task::Mi);
    cfg.bypass = true;
    cfg.n_val = 2000;
    let r = run(&cfg).unwrap();
    let est = metric(&r, "mi_estimate");
    assert!((est - 10.2165).abs() / 10.2165 < 0.02, "{est}");
}

fn strip_wall(trace: &str) -> String {
    trace.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n")
}

#[test]
fn identical_config_gives_identical_outputs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = small(Task::Gaussians, "seed = 7\n");
        cfg.output_dir = d.path().to_path_buf();
        let r = run(&cfg).unwrap();
        write_all(&r, &cfg, 0.0).unwrap();
    }
    let read = |i: usize, f: &str| fs::read_to_string(dirs[i].path().join(f)).unwrap();
    assert_eq!(read(0, "ratios.csv"), read(1, "ratios.csv"));
    assert_eq!(strip_wall(&read(0, "trace.csv")), strip_wall(&read(1, "trace.csv")));
    assert!(read(0, "trace.csv").starts_with("step,loss,val_mse,wall_ms\n"));

    let mut cfg = small(Task::Gaussians, "seed = 8\n");
    cfg.output_dir = dirs[1].path().to_path_buf();
    write_all(&run(&cfg).unwrap(), &cfg, 0.0).unwrap();
    assert_ne!(read(0, "ratios.csv"), read(1, "ratios.csv"));
}

#[test]
fn reported_test_error_comes_from_the_best_validation_step() {
    let mut cfg = small(Task::Gaussians, "lr = 3e-3\n");
    cfg.n_iters = 600;
    let r = run(&cfg).unwrap();
    let best = r.trace.iter().filter(|t| t.val_mse.is_some()).min_by(|a, b| a.val_mse.unwrap().total_cmp(&b.val_mse.unwrap())).unwrap();
    assert_eq!(r.metrics["best_step"].as_u64().unwrap() as usize, best.step);
    assert_eq!(metric(&r, "best_val_mse"), best.val_mse.unwrap());
    assert!(metric(&r, "test_mse").is_finite());
}

#[test]
fn learning_rate_grid_keeps_the_best_validation_run() {
    let r = run(&small(Task::Gaussians, "lr_grid = 1e-5, 3e-3\n")).unwrap();
    let grid = r.metrics["lr_grid"].as_array().unwrap();
    assert_eq!(grid.len(), 2);
    let vals: Vec<f64> = grid.iter().map(|g| g["best_val_mse"].as_f64().unwrap()).collect();
    let lowest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(metric(&r, "best_val_mse"), lowest);
    assert_eq!(metric(&r, "selected_lr"), if vals[0] <= vals[1] { 1e-5 } else { 3e-3 });
}

#[test]
fn query_file_rows_reach_ratios_csv() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.csv");
    fs::write(&q, "a,b\n0,0\n4,4\n1.5,-2\n").unwrap();
    let cfg = ExperimentConfig::parse(&format!("task = gaussians\nbypass = true\nn_val = 100\nn_test = 100\nqueries = {}\n", q.display())).unwrap();
    let r = run(&cfg).unwrap();
    assert_eq!(r.ratios.len(), 3);
    assert_eq!(r.ratios[2].x, vec![1.5, -2.0]);
    // log N(x; 4, I) - log N(x; 0, I) = 4 sum(x) - 16 in two dimensions
    assert!((r.ratios[1].truth - 16.0).abs() < 1e-12);

    fs::write(&q, "0,0,0\n").unwrap();
    assert!(run(&cfg).is_err());
}

#[test]
fn vectorised_mi_error_drops_below_tsm_in_the_first_quarter() {
    // the first quarter of the 20001-step schedule; the trace is a prefix of the full run
    let mut errs = Vec::new();
    for obj in [Objective::CtsmV, Objective::Tsm] {
        let mut cfg = ExperimentConfig::defaults(Task::Mi);
        cfg.objective = obj;
        cfg.lr = 1e-3;
        cfg.n_iters = 5000;
        cfg.eval_every = 1000;
        cfg.n_val = 2000;
        let r = run_mi(&cfg).unwrap();
        assert!(!r.failed);
        errs.push(r.trace.iter().map(|t| t.abs_error.unwrap()).collect::<Vec<_>>());
    }
    eprintln!("ctsm_v {:?}\ntsm {:?}", errs[0], errs[1]);
    assert!(errs[0].iter().zip(&errs[1]).any(|(v, t)| v < t));
}

#[test]
fn injected_faults_are_caught() {
    assert!(mixture_identity(Inject::None, 3).unwrap().passed);
    assert!(!mixture_identity(Inject::SignFlip, 3).unwrap().passed);
    assert!(gradient_equivalence(Inject::None, 3).unwrap().passed);
    assert!(!gradient_equivalence(Inject::LambdaDotCoeff1, 3).unwrap().passed);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_timescore"))
}

#[test]
fn cli_applies_overrides_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\ntask = gaussians\nhidden = 8\nn_iters = 50\neval_every = 25\nn_val = 50\nn_test = 50\nseed = 1\n").unwrap();
    let out = dir.path().join("out");
    let st = bin().args(["gaussians", "--config"]).arg(&cfg).args(["--seed", "5", "--out"]).arg(&out).env("RUST_LOG", "warn").status().unwrap();
    assert!(st.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 5);
    assert_eq!(summary["task"], "gaussians");
    assert!(summary["git_hash"].is_string());
    assert!(summary["metrics"]["test_mse"].is_number());
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let ratios = fs::read_to_string(out.join("ratios.csv")).unwrap();
    assert!(ratios.starts_with("x0,x1,log_ratio,truth,n_evals\n"));
}

#[test]
fn cli_rejects_bad_configs_and_mismatched_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "task = gaussians\nlearning_rate = 1\n").unwrap();
    let o = bin().args(["gaussians", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    fs::write(&cfg, "task = gmm\n").unwrap();
    assert!(!bin().args(["gaussians", "--config"]).arg(&cfg).output().unwrap().status.success());
}

#[test]
fn check_verb_exits_non_zero_on_injected_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "task = check\ninject = sign_flip\n").unwrap();
    let o = bin().args(["check", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).env("RUST_LOG", "warn").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/summary.json")).unwrap()).unwrap();
    let checks = summary["metrics"]["checks"].as_array().unwrap();
    let mix = checks.iter().find(|c| c["name"] == "mixture_identity").unwrap();
    assert_eq!(mix["passed"], false);
    assert!(checks.iter().filter(|c| c["name"] != "mixture_identity").all(|c| c["passed"] == true));
}
