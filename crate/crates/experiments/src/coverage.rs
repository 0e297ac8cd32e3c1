//! Joint coverage of sieve confidence regions, and the D² Q-Q diagnostic.

use cyclefqi::envs::{sample_offline_dataset, EnvConfig};
use cyclefqi::fqi::train_cyclefqi;
use cyclefqi::inference::{
    chi2_cdf, chi2_quantile, ensemble_evaluate, ks_p_value, ks_statistic, mahalanobis_d2,
};
use cyclefqi::mdp::{cycles_for_tolerance, monte_carlo_estimate, CyclicEnv, PolicyVector};
use cyclefqi::rng::{self, child_stream};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::join_floats;

/// Monte Carlo value of the reference policy, one entry per stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub v_star: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub trajectories: usize,
    pub cycles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub n_per_stage: usize,
    pub trial: usize,
    pub seed: u64,
    pub v_hat: Vec<f64>,
    /// Row-major, after any debug inflation.
    pub sigma_hat: Vec<f64>,
    pub d2: f64,
    pub covered: bool,
    pub sq_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub n_per_stage: usize,
    pub trial: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub n_per_stage: usize,
    /// Total sample size across stages.
    pub n: usize,
    pub coverage: f64,
    pub mse: f64,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub truth: GroundTruth,
    pub threshold: f64,
    pub rows: Vec<CoverageRow>,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
}

impl CoverageReport {
    pub fn row(&self, n_per_stage: usize) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.n_per_stage == n_per_stage)
    }

    pub fn d2_values(&self, n_per_stage: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.n_per_stage == n_per_stage)
            .map(|r| r.d2)
            .collect()
    }
}

/// Flat CSV form of a [`TrialRecord`].
#[derive(Debug, Serialize)]
pub struct TrialRow {
    pub n_per_stage: usize,
    pub trial: usize,
    pub seed: u64,
    pub v_hat: String,
    pub sigma_hat: String,
    pub d2: f64,
    pub covered: bool,
    pub sq_error: f64,
}

impl From<&TrialRecord> for TrialRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            n_per_stage: r.n_per_stage,
            trial: r.trial,
            seed: r.seed,
            v_hat: join_floats(&r.v_hat),
            sigma_hat: join_floats(&r.sigma_hat),
            d2: r.d2,
            covered: r.covered,
            sq_error: r.sq_error,
        }
    }
}

fn env_seed(env: &EnvConfig) -> u64 {
    match env {
        EnvConfig::Linear { seed, .. } => *seed,
        _ => 0,
    }
}

/// Trains the reference policy on a large dataset drawn from the behavior
/// distribution. Seeded by the environment, not the experiment.
pub fn reference_policy(config: &ExperimentConfig, env: &dyn CyclicEnv) -> Result<PolicyVector> {
    let seed = rng::derive_seed(env_seed(&config.env), &[0x7275_7468]);
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        env,
        &behavior,
        config.coverage.reference_n_per_stage,
        &config.env.default_sampling(),
        &mut child_stream(seed, &[0]),
    )?;
    let train = config.train_config(rng::derive_seed(seed, &[1]));
    let (_, policy) = train_cyclefqi(&data, env, config.constraints(env)?, &train)?;
    Ok(policy)
}

pub fn ground_truth(
    config: &ExperimentConfig,
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
) -> Result<GroundTruth> {
    let seed = rng::derive_seed(env_seed(&config.env), &[0x7275_7468, 2]);
    let cycles = cycles_for_tolerance(env.stages(), config.coverage.truth_tolerance)?;
    let m = config.coverage.truth_trajectories;
    let mut v_star = Vec::new();
    let mut std_errors = Vec::new();
    for k in 0..env.num_stages() {
        let est = monte_carlo_estimate(env, policy, k, m, cycles, &mut child_stream(seed, &[k as u64]))?;
        v_star.push(est.mean);
        std_errors.push(est.std_error);
    }
    Ok(GroundTruth {
        v_star,
        std_errors,
        trajectories: m,
        cycles,
    })
}

fn run_trial(
    config: &ExperimentConfig,
    env: &dyn CyclicEnv,
    v_star: &[f64],
    threshold: f64,
    n_per_stage: usize,
    trial: usize,
) -> cyclefqi::Result<TrialRecord> {
    let seed = config.seed + trial as u64;
    let tag = n_per_stage as u64;
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        env,
        &behavior,
        n_per_stage,
        &config.env.default_sampling(),
        &mut child_stream(seed, &[tag, 0]),
    )?;
    let train = config.train_config(rng::derive_seed(seed, &[tag, 1]));
    let constraints = config
        .constraints(env)
        .map_err(|e| cyclefqi::Error::InvalidArgument(e.to_string()))?;
    let mut result = ensemble_evaluate(
        &data,
        env,
        &constraints,
        &train,
        &config.inference_config(),
        &mut child_stream(seed, &[tag, 2]),
    )?;
    let inflation = config.coverage.sigma_inflation;
    for row in &mut result.sigma_hat {
        row.iter_mut().for_each(|x| *x *= inflation);
    }
    let d2 = mahalanobis_d2(&result, v_star)?;
    let sq_error = result
        .v_hat
        .iter()
        .zip(v_star)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(TrialRecord {
        n_per_stage,
        trial,
        seed,
        sigma_hat: result.sigma_hat.concat(),
        v_hat: result.v_hat,
        d2,
        covered: d2 <= threshold,
        sq_error,
    })
}

/// Coverage percentage and MSE of the successful records at one size.
pub fn summarize(
    n_per_stage: usize,
    num_stages: usize,
    records: &[TrialRecord],
    failures: usize,
) -> CoverageRow {
    let mine: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| r.n_per_stage == n_per_stage)
        .collect();
    let t = mine.len();
    let (coverage, mse) = if t == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let covered = mine.iter().filter(|r| r.covered).count();
        (
            100.0 * covered as f64 / t as f64,
            mine.iter().map(|r| r.sq_error).sum::<f64>() / t as f64,
        )
    };
    CoverageRow {
        n_per_stage,
        n: n_per_stage * num_stages,
        coverage,
        mse,
        trials: t,
        failures,
    }
}

/// Runs every trial at every size against a precomputed ground truth.
pub fn run_coverage_with_truth(
    config: &ExperimentConfig,
    env: &dyn CyclicEnv,
    truth: GroundTruth,
) -> Result<CoverageReport> {
    let k = env.num_stages();
    let threshold = chi2_quantile(k, config.coverage.level)?;
    let jobs: Vec<(usize, usize)> = config
        .n_per_stage
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(n, t)| {
            run_trial(config, env, &truth.v_star, threshold, n, t).map_err(|e| TrialFailure {
                n_per_stage: n,
                trial: t,
                seed: config.seed + t as u64,
                message: e.to_string(),
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => {
                log::warn!("n_per_stage {} trial {}: {}", f.n_per_stage, f.trial, f.message);
                failures.push(f);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::AllTrialsFailed(jobs.len()));
    }
    let rows = config
        .n_per_stage
        .iter()
        .map(|&n| {
            let failed = failures.iter().filter(|f| f.n_per_stage == n).count();
            summarize(n, k, &records, failed)
        })
        .collect();
    Ok(CoverageReport {
        truth,
        threshold,
        rows,
        records,
        failures,
    })
}

pub fn run_coverage_experiment(config: &ExperimentConfig) -> Result<CoverageReport> {
    config.validate()?;
    let env = config.env.build()?;
    let policy = reference_policy(config, env.as_ref())?;
    let truth = ground_truth(config, env.as_ref(), &policy)?;
    log::info!("ground truth v* = {:?}", truth.v_star);
    run_coverage_with_truth(config, env.as_ref(), truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqPoint {
    pub i: usize,
    pub empirical: f64,
    pub theoretical: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QqReport {
    pub dof: usize,
    pub points: Vec<QqPoint>,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

/// Sorted `d2` against chi-square quantiles at `(i - 0.5) / T`, with the
/// one-sample KS test against the same distribution.
pub fn qq_pairs(d2: &[f64], dof: usize) -> Result<QqReport> {
    if d2.is_empty() {
        return Err(Error::Config("no D² values to compare".into()));
    }
    let mut sorted = d2.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = sorted.len() as f64;
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            Ok(QqPoint {
                i: i + 1,
                empirical: x,
                theoretical: chi2_quantile(dof, (i as f64 + 0.5) / t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = ks_statistic(&sorted, |x| chi2_cdf(x, dof));
    Ok(QqReport {
        dof,
        points,
        ks_statistic: ks,
        ks_p_value: ks_p_value(ks, sorted.len()),
    })
}

/// `count` draws from the chi-square null by CDF inversion.
pub fn sample_chi2_null(dof: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed);
    (0..count)
        .map(|_| {
            let u: f64 = r.random_range(f64::EPSILON..1.0);
            Ok(chi2_quantile(dof, u)?)
        })
        .collect()
}

/// Q-Q data at the largest configured size; the coverage report comes along
/// when trials were actually run.
pub fn run_qq_diagnostic(config: &ExperimentConfig) -> Result<(QqReport, Option<CoverageReport>)> {
    config.validate()?;
    let env = config.env.build()?;
    let dof = env.num_stages();
    if config.coverage.null_sampler {
        let d2 = sample_chi2_null(dof, config.trials, config.seed)?;
        return Ok((qq_pairs(&d2, dof)?, None));
    }
    let n = *config.n_per_stage.iter().max().expect("validated non-empty");
    let cfg = ExperimentConfig {
        n_per_stage: vec![n],
        ..config.clone()
    };
    let report = run_coverage_experiment(&cfg)?;
    let qq = qq_pairs(&report.d2_values(n), dof)?;
    Ok((qq, Some(report)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, covered: bool, sq_error: f64) -> TrialRecord {
        TrialRecord {
            n_per_stage: n,
            trial: 0,
            seed: 0,
            v_hat: vec![0.0; 3],
            sigma_hat: vec![0.0; 9],
            d2: 0.0,
            covered,
            sq_error,
        }
    }

    #[test]
    fn summary_arithmetic() {
        let recs = vec![
            record(10, true, 1.0),
            record(10, false, 3.0),
            record(10, true, 2.0),
            record(10, true, 2.0),
            record(20, false, 9.0),
        ];
        let row = summarize(10, 3, &recs, 1);
        assert_eq!(row.n, 30);
        assert_eq!(row.trials, 4);
        assert_eq!(row.coverage, 75.0);
        assert_eq!(row.mse, 2.0);
        assert_eq!(row.failures, 1);
    }

    #[test]
    fn single_value_sits_at_the_median() {
        let qq = qq_pairs(&[1.3], 3).unwrap();
        assert_eq!(qq.points.len(), 1);
        assert!((qq.points[0].theoretical - chi2_quantile(3, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn qq_rows_are_sorted_and_one_per_trial() {
        let d2 = sample_chi2_null(3, 57, 4).unwrap();
        let qq = qq_pairs(&d2, 3).unwrap();
        assert_eq!(qq.points.len(), 57);
        assert!(qq.points.windows(2).all(|w| w[0].empirical <= w[1].empirical
            && w[0].theoretical < w[1].theoretical));
    }

    #[test]
    fn null_sampler_p_values_look_uniform() {
        // Under the null the KS p-value is uniform: check the rejection rate
        // at 0.1 and the mean across repeats.
        let ps: Vec<f64> = (0..400)
            .map(|s| {
                let d2 = sample_chi2_null(3, 200, s).unwrap();
                qq_pairs(&d2, 3).unwrap().ks_p_value
            })
            .collect();
        let reject = ps.iter().filter(|&&p| p < 0.1).count() as f64 / 400.0;
        let mean = ps.iter().sum::<f64>() / 400.0;
        // Binomial sd at p = 0.1 with 400 draws is 0.015.
        assert!((reject - 0.1).abs() < 0.05, "rejection rate {reject}");
        assert!((mean - 0.5).abs() < 0.05, "mean p {mean}");
    }
}
