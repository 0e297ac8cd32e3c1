//! Experiment harness for cyclefqi: coverage and Q-Q diagnostics for sieve
//! inference, the glucose policy benchmark, forest tuning and the
//! contraction battery. Every run writes CSV artifacts headed by its
//! resolved configuration.

pub mod benchmark;
pub mod config;
pub mod coverage;
pub mod error;
pub mod report;

use std::path::PathBuf;

use cyclefqi::mdp::contraction::{run_contraction_suite, ContractionReport};
use serde::Serialize;

pub use config::{ExperimentConfig, ExperimentKind, Method};
pub use error::{Error, Result};

use coverage::TrialRow;
use report::write_artifact;

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    /// Trials that failed without failing the run.
    pub warnings: usize,
    pub lines: Vec<String>,
}

#[derive(Serialize)]
struct ContractionRow<'a> {
    check: &'a str,
    passed: bool,
    cases: usize,
    worst_excess: f64,
}

#[derive(Serialize)]
struct QqSummaryRow {
    trials: usize,
    dof: usize,
    ks_statistic: f64,
    ks_p_value: f64,
}

pub fn contraction_rows(report: &ContractionReport) -> Vec<impl Serialize + '_> {
    report
        .checks
        .iter()
        .map(|c| ContractionRow {
            check: &c.name,
            passed: c.passed,
            cases: c.cases,
            worst_excess: c.worst_excess,
        })
        .collect()
}

/// Runs `config` and writes its artifacts under `config.out_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = &config.out_dir;
    let mut artifacts = Vec::new();
    let mut lines = Vec::new();
    let mut warnings = 0;
    match config.kind {
        ExperimentKind::Coverage => {
            let rep = coverage::run_coverage_experiment(config)?;
            warnings = rep.failures.len();
            artifacts.push(write_artifact(dir, "coverage.csv", "coverage", config, &rep.rows)?);
            let trials: Vec<TrialRow> = rep.records.iter().map(TrialRow::from).collect();
            artifacts.push(write_artifact(dir, "coverage_trials.csv", "coverage trials", config, &trials)?);
            if !rep.failures.is_empty() {
                artifacts.push(write_artifact(dir, "coverage_failures.csv", "coverage failures", config, &rep.failures)?);
            }
            lines.push(format!("v* = {:?}", rep.truth.v_star));
            for r in &rep.rows {
                lines.push(format!(
                    "n = {:>5}  coverage = {:5.1}%  mse = {:.4e}  trials = {}  failures = {}",
                    r.n, r.coverage, r.mse, r.trials, r.failures
                ));
            }
        }
        ExperimentKind::Qq => {
            let (qq, rep) = coverage::run_qq_diagnostic(config)?;
            if let Some(rep) = &rep {
                warnings = rep.failures.len();
            }
            artifacts.push(write_artifact(dir, "qq.csv", "qq", config, &qq.points)?);
            let summary = [QqSummaryRow {
                trials: qq.points.len(),
                dof: qq.dof,
                ks_statistic: qq.ks_statistic,
                ks_p_value: qq.ks_p_value,
            }];
            artifacts.push(write_artifact(dir, "qq_summary.csv", "qq summary", config, &summary)?);
            lines.push(format!(
                "KS D = {:.4}  p = {:.4}  ({} values)",
                qq.ks_statistic,
                qq.ks_p_value,
                qq.points.len()
            ));
        }
        ExperimentKind::Benchmark => {
            let rep = benchmark::run_policy_benchmark(config)?;
            warnings = rep.failures.len();
            artifacts.push(write_artifact(dir, "benchmark.csv", "benchmark", config, &rep.rows)?);
            artifacts.push(write_artifact(dir, "benchmark_trials.csv", "benchmark trials", config, &rep.trials)?);
            for r in &rep.rows {
                let se = r.std_error.map_or("-".to_string(), |s| format!("{s:.2}"));
                lines.push(format!(
                    "{:<10} U = {:<6} n = {:>4}  mean = {:9.2}  se = {}",
                    r.method.name(),
                    r.update_set,
                    r.n_per_stage,
                    r.mean,
                    se
                ));
            }
        }
        ExperimentKind::TuneForest => {
            let rows = benchmark::tune_forest(config)?;
            artifacts.push(write_artifact(dir, "tune_forest.csv", "tune-forest", config, &rows)?);
            for r in &rows {
                lines.push(format!(
                    "{:<10} trees = {:>4}  mean = {:9.2}  sd = {:7.2}{}",
                    r.method.name(),
                    r.num_trees,
                    r.mean,
                    r.std_dev,
                    if r.selected { "  *" } else { "" }
                ));
            }
        }
        ExperimentKind::Contraction => {
            let rep = run_contraction_suite(&config.contraction)?;
            let rows = contraction_rows(&rep);
            artifacts.push(write_artifact(dir, "contraction.csv", "contraction", config, &rows)?);
            for c in &rep.checks {
                lines.push(format!(
                    "{:<26} {}  cases = {}  worst excess = {:.3e}",
                    c.name,
                    if c.passed { "pass" } else { "FAIL" },
                    c.cases,
                    c.worst_excess
                ));
            }
            if !rep.passed() {
                let failed: Vec<&str> = rep
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                return Err(Error::ChecksFailed(failed.join(", ")));
            }
        }
    }
    Ok(RunSummary {
        artifacts,
        warnings,
        lines,
    })
}
