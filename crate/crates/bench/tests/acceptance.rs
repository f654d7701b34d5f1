//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Pass criterion numbers to run a subset, e.g.
//! `cargo test -p timescore-bench --test acceptance -- 1 5 9`.

use std::process::ExitCode;
use std::time::Instant;

use timescore_bench::checks::{self, CheckResult};
use timescore_bench::config::Inject;
use timescore_bench::error::Result;
use timescore_bench::reproduce;

const SEED: u64 = 0;

fn all(mut rs: Vec<CheckResult>) -> (bool, String) {
    let ok = rs.iter().all(|r| r.passed);
    let text = rs
        .drain(..)
        .map(|r| format!("{} {} = {:.6} (threshold {}){}", if r.passed { "ok" } else { "FAILED" }, r.name, r.statistic, r.threshold, if r.detail.is_empty() { String::new() } else { format!(" [{}]", r.detail) }))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, text)
}

fn criterion(n: usize) -> Result<(bool, String)> {
    Ok(match n {
        1 => all(vec![checks::mixture_identity(Inject::None, SEED)?]),
        2 => all(checks::lemma1(SEED)?),
        3 => {
            let good = checks::gradient_equivalence(Inject::None, SEED)?;
            let mut bug = checks::gradient_equivalence(Inject::LambdaDotCoeff1, SEED)?;
            // the mutated objective must be caught
            bug.name = "mutated_cosine_caught".into();
            bug.passed = !bug.passed;
            all(vec![good, bug])
        }
        4 => all(reproduce::vectorised_sum(SEED)?),
        5 => all(vec![checks::riemann_slope()?]),
        6 => {
            let (d2, _) = reproduce::gaussians_table(2, 0.5, SEED)?;
            let (d10, _) = reproduce::gaussians_table(10, 5.0, SEED)?;
            all(vec![d2, d10])
        }
        7 => all(vec![reproduce::gmm_table(SEED)?.0]),
        8 => {
            let (d40, _) = reproduce::mi_estimation(SEED)?;
            let smoke = reproduce::mi_smoke(SEED)?;
            let est = smoke.metrics["mi_estimate"].as_f64().unwrap_or(f64::NAN);
            let smoke = CheckResult {
                name: "mi_d320_smoke_finite".into(),
                passed: !smoke.failed && est.is_finite(),
                statistic: est,
                threshold: f64::INFINITY,
                detail: format!("true MI {}", smoke.metrics["true_mi"]),
            };
            all(vec![d40, smoke])
        }
        9 => all(vec![checks::importance_sampler(SEED)?]),
        10 => {
            let mut rs = vec![checks::stein_reconstruction()?];
            rs.extend(checks::hmc_moments(SEED)?);
            all(rs)
        }
        11 => all(vec![checks::differentiation(SEED)?]),
        _ => unreachable!(),
    })
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=11).contains(n)).collect();
    let which: Vec<usize> = if picked.is_empty() { (1..=11).collect() } else { picked };
    let mut failed = 0;
    for n in which {
        let start = Instant::now();
        let (ok, text) = match criterion(n) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !ok as usize;
        println!("criterion {n:>2}: {} ({:.1}s) {text}", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
