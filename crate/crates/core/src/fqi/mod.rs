//! Cyclic fitted Q-iteration and the flattened baseline.
//!
//! Each iteration computes every stage's regression targets from the
//! previous Q-vector, then refits all `(stage, action)` models. The previous
//! iterate is never modified in place.

pub mod checkpoint;
pub mod flattened;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use flattened::{
    build_flattened_problem, train_flattened_fqi, train_flattened_fqi_with, FlatActionEncoding,
    FlattenedConfig, FlattenedProblem, FlattenedQ,
};

use crate::error::{Error, Result};
use crate::mdp::{
    bellman_target, value_upper_bound, ActionValues, CyclicEnv, PolicyConstraints, PolicyVector,
    QEvaluator, StageDataset, UpdateSet,
};
use crate::regressors::{self, FittedModel, RegressorSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub regressor: RegressorSpec,
    #[serde(default)]
    pub clip_targets: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(iterations: usize, regressor: RegressorSpec) -> Self {
        Self {
            iterations,
            regressor,
            clip_targets: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".into(),
            ));
        }
        self.regressor.validate()
    }
}

/// Seed of the fit for `(iteration, stage, action)`.
pub fn fit_seed(base: u64, iteration: usize, stage: usize, action: usize) -> u64 {
    rng::derive_seed(base, &[iteration as u64, stage as u64, action as u64])
}

/// One model per action for a single stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageQ {
    pub stage: usize,
    pub state_dim: usize,
    pub models: Vec<FittedModel>,
}

impl StageQ {
    pub fn zeros(stage: usize, state_dim: usize, actions: usize) -> Self {
        Self {
            stage,
            state_dim,
            models: vec![FittedModel::constant(state_dim, 0.0); actions],
        }
    }
}

impl ActionValues for StageQ {
    fn action_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.predict(state)).collect()
    }
}

/// The vector of stage Q-functions together with the constraints it was trained under.
#[derive(Clone, Debug)]
pub struct QVector {
    stages: Vec<Arc<StageQ>>,
    constraints: PolicyConstraints,
}

impl QVector {
    pub fn new(stages: Vec<StageQ>, constraints: PolicyConstraints) -> Result<Self> {
        crate::error::check_dim("stage Q count", constraints.num_stages(), stages.len())?;
        for (k, s) in stages.iter().enumerate() {
            if s.stage != k {
                return Err(Error::InvalidArgument(format!(
                    "stage Q {} stored at position {k}",
                    s.stage
                )));
            }
            if s.models.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "stage {k} has no action models"
                )));
            }
        }
        Ok(Self {
            stages: stages.into_iter().map(Arc::new).collect(),
            constraints,
        })
    }

    /// `Q^(0)`: identically zero.
    pub fn zeros(env: &dyn CyclicEnv, constraints: PolicyConstraints) -> Result<Self> {
        let stages = env
            .stages()
            .iter()
            .enumerate()
            .map(|(k, s)| StageQ::zeros(k, s.state_dim, s.action_count))
            .collect();
        Self::new(stages, constraints)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &StageQ {
        &self.stages[k]
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageQ> {
        self.stages.iter().map(|s| s.as_ref())
    }

    pub fn constraints(&self) -> &PolicyConstraints {
        &self.constraints
    }

    pub fn update_set(&self) -> &UpdateSet {
        self.constraints.update_set()
    }

    /// Greedy on the update set (ties to the lowest action), fixed elsewhere.
    pub fn greedy_policy(&self) -> PolicyVector {
        let greedy = self
            .stages
            .iter()
            .map(|s| s.clone() as Arc<dyn ActionValues>)
            .collect();
        self.constraints.compose(greedy)
    }
}

impl QEvaluator for QVector {
    fn q_values(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>> {
        self.stages
            .get(stage)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} out of range")))?
            .action_values(state)
    }
}

pub fn greedy_policy(q: &QVector) -> PolicyVector {
    q.greedy_policy()
}

static EMPTY_SUBSAMPLE_WARNED: AtomicBool = AtomicBool::new(false);

/// Per-stage transition indices and states grouped by action.
struct ActionSubsample {
    rows: Vec<usize>,
    inputs: Vec<Vec<f64>>,
}

/// A prepared CycleFQI run over fixed data.
pub struct CycleFqi<'a> {
    env: &'a dyn CyclicEnv,
    datasets: &'a [StageDataset],
    constraints: PolicyConstraints,
    config: TrainConfig,
    subsamples: Vec<Vec<ActionSubsample>>,
    clip: Option<f64>,
}

/// Snapshot handed to observers after each iteration.
pub struct IterationRecord<'r> {
    pub iteration: usize,
    pub targets: &'r [Vec<f64>],
    pub q: &'r QVector,
}

impl<'a> CycleFqi<'a> {
    pub fn new(
        env: &'a dyn CyclicEnv,
        datasets: &'a [StageDataset],
        constraints: PolicyConstraints,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let stages = env.stages();
        crate::error::check_dim("stage datasets", stages.len(), datasets.len())?;
        crate::error::check_dim("constraint stages", stages.len(), constraints.num_stages())?;
        for (k, ds) in datasets.iter().enumerate() {
            if ds.stage != k {
                return Err(Error::InvalidArgument(format!(
                    "dataset for stage {} at position {k}",
                    ds.stage
                )));
            }
            if ds.is_empty() {
                return Err(Error::EmptyData(format!("no transitions for stage {k}")));
            }
            ds.validate(stages)?;
        }
        let subsamples = datasets
            .iter()
            .zip(stages)
            .map(|(ds, spec)| {
                (0..spec.action_count)
                    .map(|a| {
                        let rows: Vec<usize> = ds
                            .transitions
                            .iter()
                            .enumerate()
                            .filter(|(_, t)| t.action == a)
                            .map(|(i, _)| i)
                            .collect();
                        let inputs = rows
                            .iter()
                            .map(|&i| ds.transitions[i].state.clone())
                            .collect();
                        ActionSubsample { rows, inputs }
                    })
                    .collect()
            })
            .collect();
        let clip = if config.clip_targets {
            Some(value_upper_bound(stages)?)
        } else {
            None
        };
        Ok(Self {
            env,
            datasets,
            constraints,
            config,
            subsamples,
            clip,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Targets of every transition under `q`, grouped by stage.
    pub fn compute_targets(&self, q: &dyn QEvaluator) -> Result<Vec<Vec<f64>>> {
        self.datasets
            .iter()
            .map(|ds| {
                ds.transitions
                    .par_iter()
                    .map(|t| {
                        let y = bellman_target(t, q, self.env, &self.constraints)?;
                        Ok(match self.clip {
                            Some(c) => y.clamp(-c, c),
                            None => y,
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect()
    }

    /// Fits the models of `stage` to its targets for iteration `iteration` (1-based).
    pub fn fit_stage(&self, iteration: usize, stage: usize, targets: &[f64]) -> Result<StageQ> {
        let state_dim = self.env.stages()[stage].state_dim;
        let models = self.subsamples[stage]
            .par_iter()
            .enumerate()
            .map(|(a, sub)| {
                if sub.rows.is_empty() {
                    if !EMPTY_SUBSAMPLE_WARNED.swap(true, Ordering::Relaxed) {
                        log::warn!("stage {stage} action {a} has no samples; using a zero model");
                    }
                    return Ok(FittedModel::constant(state_dim, 0.0));
                }
                let ys: Vec<f64> = sub.rows.iter().map(|&i| targets[i]).collect();
                let mut r = rng::stream(fit_seed(self.config.seed, iteration, stage, a));
                regressors::fit(&self.config.regressor, &sub.inputs, &ys, &mut r)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Training {
                iteration,
                stage,
                source: Box::new(e),
            })?;
        Ok(StageQ {
            stage,
            state_dim,
            models,
        })
    }

    /// Fits stages in the given order; the result is indexed by stage.
    pub fn fit_stages_in_order(
        &self,
        iteration: usize,
        targets: &[Vec<f64>],
        order: &[usize],
    ) -> Result<QVector> {
        let mut fitted: Vec<Option<StageQ>> = vec![None; targets.len()];
        for &k in order {
            fitted[k] = Some(self.fit_stage(iteration, k, &targets[k])?);
        }
        let stages = fitted
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                s.ok_or_else(|| Error::InvalidArgument(format!("stage {k} missing from fit order")))
            })
            .collect::<Result<Vec<_>>>()?;
        QVector::new(stages, self.constraints.clone())
    }

    pub fn fit_stages(&self, iteration: usize, targets: &[Vec<f64>]) -> Result<QVector> {
        let order: Vec<usize> = (0..targets.len()).collect();
        self.fit_stages_in_order(iteration, targets, &order)
    }

    pub fn run(&self) -> Result<QVector> {
        self.run_with(|_| {})
    }

    /// Runs all iterations, calling `observe` after each one.
    pub fn run_with(&self, mut observe: impl FnMut(IterationRecord<'_>)) -> Result<QVector> {
        let mut q = QVector::zeros(self.env, self.constraints.clone())?;
        for m in 1..=self.config.iterations {
            let targets = self.compute_targets(&q).map_err(|e| Error::Training {
                iteration: m,
                stage: usize::MAX,
                source: Box::new(e),
            })?;
            q = self.fit_stages(m, &targets)?;
            log::debug!("cyclefqi iteration {m}/{} done", self.config.iterations);
            observe(IterationRecord {
                iteration: m,
                targets: &targets,
                q: &q,
            });
        }
        Ok(q)
    }
}

/// Trains CycleFQI and returns the final Q-vector with its policy.
pub fn train_cyclefqi(
    datasets: &[StageDataset],
    env: &dyn CyclicEnv,
    constraints: PolicyConstraints,
    config: &TrainConfig,
) -> Result<(QVector, PolicyVector)> {
    let q = CycleFqi::new(env, datasets, constraints, config.clone())?.run()?;
    let policy = q.greedy_policy();
    Ok((q, policy))
}
