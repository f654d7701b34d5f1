use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use timescore_bench::config::{ExperimentConfig, LrGrid, Task};
use timescore_bench::error::{BenchError, Result};
use timescore_bench::{output, tasks};

#[derive(Parser)]
#[command(name = "timescore", version, about = "Density-ratio experiments with time score matching")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Searches the default learning-rate grid of the task.
    #[arg(long, global = true)]
    lr_grid: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Two distant Gaussians.
    Gaussians,
    /// Bimodal Gaussian mixtures on the Schrodinger bridge path.
    Gmm,
    /// Mutual information between correlated Gaussian blocks.
    Mi,
    /// Invariant checks; exits non-zero on any failure.
    Check,
}

impl Verb {
    fn task(self) -> Task {
        match self {
            Verb::Gaussians => Task::Gaussians,
            Verb::Gmm => Task::Gmm,
            Verb::Mi => Task::Mi,
            Verb::Check => Task::Check,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let task = cli.verb.task();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::defaults(task),
    };
    if cfg.task != task {
        return Err(BenchError::Config { line: 0, msg: format!("config is for `{}` but the verb is `{}`", cfg.task.name(), task.name()) });
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if cli.lr_grid {
        cfg.lr_grid = LrGrid::Paper;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let run = || -> Result<bool> {
        let cfg = load(&cli)?;
        let report = tasks::run(&cfg)?;
        output::write_all(&report, &cfg, start.elapsed().as_secs_f64())?;
        println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        Ok(report.failed)
    };
    match run() {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
