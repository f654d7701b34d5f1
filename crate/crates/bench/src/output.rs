//! `trace.csv`, `ratios.csv` and `summary.json`.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so two
//! runs with the same configuration produce identical CSV bytes apart from
//! the `wall_ms` column.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::json;

use crate::config::{ExperimentConfig, Task};
use crate::error::Result;
use crate::tasks::Report;

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_trace(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if report.task == Task::Mi {
        w.write_record(["step", "loss", "mi_estimate", "abs_error", "wall_ms"])?;
        for r in &report.trace {
            w.write_record([r.step.to_string(), r.loss.to_string(), opt(r.mi_estimate), opt(r.abs_error), r.wall_ms.to_string()])?;
        }
    } else {
        w.write_record(["step", "loss", "val_mse", "wall_ms"])?;
        for r in &report.trace {
            w.write_record([r.step.to_string(), r.loss.to_string(), opt(r.val_mse), r.wall_ms.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ratios(report: &Report, dim: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.extend(["log_ratio", "truth", "n_evals"].map(String::from));
    w.write_record(&header)?;
    for r in &report.ratios {
        let mut rec: Vec<String> = r.x.iter().map(f64::to_string).collect();
        rec.extend([r.log_ratio.to_string(), r.truth.to_string(), r.n_evals.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn git_hash() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_summary(report: &Report, cfg: &ExperimentConfig, wall_s: f64, path: &Path) -> Result<()> {
    let summary = json!({
        "task": report.task,
        "failed": report.failed,
        "metrics": report.metrics,
        "config": cfg,
        "git_hash": git_hash(),
        "wall_time_s": wall_s,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

/// Writes all three files into `cfg.output_dir`.
pub fn write_all(report: &Report, cfg: &ExperimentConfig, wall_s: f64) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_trace(report, &dir.join("trace.csv"))?;
    write_ratios(report, cfg.dim, &dir.join("ratios.csv"))?;
    write_summary(report, cfg, wall_s, &dir.join("summary.json"))
}
