//! Policy benchmark on the glucose simulator and forest-size tuning.

use cyclefqi::envs::sample_offline_dataset;
use cyclefqi::fqi::{train_cyclefqi, train_flattened_fqi, FlattenedConfig, TrainConfig};
use cyclefqi::mdp::{
    monte_carlo_estimate, CyclicEnv, MonteCarloEstimate, PolicyConstraints, PolicyVector,
    StageDataset, StagePolicy,
};
use cyclefqi::regressors::RegressorSpec;
use cyclefqi::rng::{self, child_stream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};

/// Mean discounted return over `days` cycles from the stage-0 entry
/// distribution.
pub fn evaluate_days(
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    trajectories: usize,
    days: usize,
    seed: u64,
) -> cyclefqi::Result<MonteCarloEstimate> {
    monte_carlo_estimate(env, policy, 0, trajectories, days, &mut rng::stream(seed))
}

/// The learned policy on the update set, the fixed policies elsewhere.
pub fn restrict_to_update_set(policy: PolicyVector, constraints: &PolicyConstraints) -> PolicyVector {
    let stages = (0..policy.num_stages())
        .map(|k| match constraints.fixed_policy(k) {
            Some(p) => p.clone(),
            None => policy.stage(k).clone(),
        })
        .collect();
    PolicyVector::new(stages)
}

/// Trains `method` on `data`; `Random` ignores the data.
pub fn train_method(
    method: Method,
    data: &[StageDataset],
    env: &dyn CyclicEnv,
    constraints: &PolicyConstraints,
    train: &TrainConfig,
    flat: FlattenedConfig,
) -> cyclefqi::Result<PolicyVector> {
    Ok(match method {
        Method::Cyclefqi => train_cyclefqi(data, env, constraints.clone(), train)?.1,
        Method::Flattened => {
            let (_, policy) = train_flattened_fqi(data, env, train, flat)?;
            restrict_to_update_set(policy, constraints)
        }
        Method::Random => PolicyVector::new(
            env.action_counts()
                .into_iter()
                .map(|actions| StagePolicy::Uniform { actions })
                .collect(),
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodTrial {
    pub method: Method,
    pub n_per_stage: usize,
    pub trial: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub update_set: String,
    pub n_per_stage: usize,
    pub mean: f64,
    /// Standard error across trials; absent with a single trial.
    pub std_error: Option<f64>,
    pub single_trial: bool,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub trials: Vec<MethodTrial>,
    pub failures: Vec<String>,
}

impl BenchmarkReport {
    pub fn row(&self, method: Method, n_per_stage: usize) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.n_per_stage == n_per_stage)
    }
}

fn run_benchmark_trial(
    config: &ExperimentConfig,
    env: &dyn CyclicEnv,
    constraints: &PolicyConstraints,
    n_per_stage: usize,
    trial: usize,
) -> std::result::Result<Vec<MethodTrial>, Error> {
    let seed = config.seed + trial as u64;
    let tag = n_per_stage as u64;
    let b = &config.benchmark;
    let wrap = |source| Error::Trial { trial, source };
    let needs_data = b.methods.iter().any(|m| *m != Method::Random);
    let data = if needs_data {
        let behavior = PolicyVector::uniform(&env.action_counts());
        sample_offline_dataset(
            env,
            &behavior,
            n_per_stage,
            &config.env.default_sampling(),
            &mut child_stream(seed, &[tag]),
        )
        .map_err(wrap)?
    } else {
        Vec::new()
    };
    let train = config.train_config(seed);
    let eval_seed = rng::derive_seed(b.eval_seed + trial as u64, &[tag]);
    b.methods
        .iter()
        .map(|&method| {
            let policy = train_method(method, &data, env, constraints, &train, b.flattened)
                .map_err(wrap)?;
            let est = evaluate_days(env, &policy, b.eval_trajectories, b.eval_days, eval_seed)
                .map_err(wrap)?;
            Ok(MethodTrial {
                method,
                n_per_stage,
                trial,
                seed,
                mean_return: est.mean,
                std_error: est.std_error,
            })
        })
        .collect()
}

/// Mean and standard error (`None` for one value).
pub fn mean_and_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

pub fn run_policy_benchmark(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let env = config.env.build()?;
    let constraints = config.constraints(env.as_ref())?;
    let jobs: Vec<(usize, usize)> = config
        .n_per_stage
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(n, t)| run_benchmark_trial(config, env.as_ref(), &constraints, n, t))
        .collect();
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    let mut failed_per_n = vec![0; config.n_per_stage.len()];
    for ((n, _), o) in jobs.iter().zip(outcomes) {
        match o {
            Ok(mut rows) => trials.append(&mut rows),
            Err(e) => {
                log::warn!("n_per_stage {n}: {e}");
                failures.push(format!("n_per_stage {n}: {e}"));
                let i = config.n_per_stage.iter().position(|m| m == n).expect("listed");
                failed_per_n[i] += 1;
            }
        }
    }
    if trials.is_empty() {
        return Err(Error::AllTrialsFailed(jobs.len()));
    }
    let label = config.update_set_label();
    let mut rows = Vec::new();
    for (i, &n) in config.n_per_stage.iter().enumerate() {
        for &method in &config.benchmark.methods {
            let xs: Vec<f64> = trials
                .iter()
                .filter(|t| t.method == method && t.n_per_stage == n)
                .map(|t| t.mean_return)
                .collect();
            if xs.is_empty() {
                continue;
            }
            let (mean, std_error) = mean_and_se(&xs);
            rows.push(BenchmarkRow {
                method,
                update_set: label.clone(),
                n_per_stage: n,
                mean,
                std_error,
                single_trial: xs.len() == 1,
                trials: xs.len(),
                failures: failed_per_n[i],
            });
        }
    }
    Ok(BenchmarkReport {
        rows,
        trials,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneRow {
    pub method: Method,
    pub num_trees: usize,
    pub mean: f64,
    /// Standard deviation across evaluation trajectories.
    pub std_dev: f64,
    pub selected: bool,
}

/// Index of the best score; ties go to the earliest, i.e. the smallest
/// grid value when the grid is sorted.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains at each tree count on the tuning seed and scores by mean return on
/// the evaluation seed.
pub fn tune_forest(config: &ExperimentConfig) -> Result<Vec<TuneRow>> {
    config.validate()?;
    let env = config.env.build()?;
    let constraints = config.constraints(env.as_ref())?;
    let params = match config.regressor {
        RegressorSpec::RandomForest(p) => p,
        _ => unreachable!("validated"),
    };
    let t = &config.tune;
    let mut grid = t.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let n = config.n_per_stage[0];
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        env.as_ref(),
        &behavior,
        n,
        &config.env.default_sampling(),
        &mut rng::stream(config.seed),
    )?;
    let mut rows = Vec::new();
    for &method in &t.methods {
        let scored = grid
            .par_iter()
            .map(|&trees| {
                let mut p = params;
                p.num_trees = trees;
                let train = TrainConfig::new(config.iterations, RegressorSpec::RandomForest(p))
                    .with_seed(config.seed);
                let policy = train_method(
                    method,
                    &data,
                    env.as_ref(),
                    &constraints,
                    &train,
                    config.benchmark.flattened,
                )?;
                let est =
                    evaluate_days(env.as_ref(), &policy, t.eval_trajectories, t.eval_days, t.eval_seed)?;
                let sd = est.std_error * (est.trajectories as f64).sqrt();
                Ok((trees, est.mean, sd))
            })
            .collect::<cyclefqi::Result<Vec<_>>>()?;
        let best = select_best(&scored.iter().map(|s| s.1).collect::<Vec<_>>());
        rows.extend(scored.iter().enumerate().map(|(i, &(trees, mean, std_dev))| TuneRow {
            method,
            num_trees: trees,
            mean,
            std_dev,
            selected: Some(i) == best,
        }));
    }
    Ok(rows)
}
