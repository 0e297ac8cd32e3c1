//! Standard FQI on a zero-padded joint state space with the disjoint union
//! of all stage action sets.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_seed, TrainConfig};
use crate::error::{check_dim, Error, Result};
use crate::mdp::{
    argmax, ActionValues, CyclicEnv, PolicyVector, StageDataset, StagePolicy, StageSpec,
};
use crate::regressors::{self, FittedModel};
use crate::rng;

/// How joint actions enter the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlatActionEncoding {
    /// A single model whose input carries a one-hot joint action.
    #[default]
    OneHot,
    /// One model per joint action.
    PerActionModels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenedConfig {
    /// Append a one-hot stage indicator when there is more than one stage.
    pub stage_indicator: bool,
    pub encoding: FlatActionEncoding,
}

impl Default for FlattenedConfig {
    fn default() -> Self {
        Self {
            stage_indicator: true,
            encoding: FlatActionEncoding::OneHot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattenedProblem {
    pub state_dims: Vec<usize>,
    pub block_offsets: Vec<usize>,
    /// Sum of the stage state dimensions.
    pub joint_state_dim: usize,
    /// Length of the stage indicator block (0 when omitted).
    pub indicator_dim: usize,
    pub action_counts: Vec<usize>,
    pub action_offsets: Vec<usize>,
    pub joint_action_count: usize,
    pub encoding: FlatActionEncoding,
}

pub fn build_flattened_problem(stages: &[StageSpec], config: FlattenedConfig) -> FlattenedProblem {
    let offsets = |xs: &[usize]| {
        xs.iter()
            .scan(0, |acc, &x| {
                let o = *acc;
                *acc += x;
                Some(o)
            })
            .collect::<Vec<_>>()
    };
    let state_dims: Vec<usize> = stages.iter().map(|s| s.state_dim).collect();
    let action_counts: Vec<usize> = stages.iter().map(|s| s.action_count).collect();
    let k = stages.len();
    FlattenedProblem {
        block_offsets: offsets(&state_dims),
        joint_state_dim: state_dims.iter().sum(),
        indicator_dim: if config.stage_indicator && k > 1 {
            k
        } else {
            0
        },
        action_offsets: offsets(&action_counts),
        joint_action_count: action_counts.iter().sum(),
        state_dims,
        action_counts,
        encoding: config.encoding,
    }
}

impl FlattenedProblem {
    pub fn num_stages(&self) -> usize {
        self.state_dims.len()
    }

    /// Joint state length including the indicator block.
    pub fn embedded_dim(&self) -> usize {
        self.joint_state_dim + self.indicator_dim
    }

    /// Regression input length.
    pub fn input_dim(&self) -> usize {
        match self.encoding {
            FlatActionEncoding::OneHot => self.embedded_dim() + self.joint_action_count,
            FlatActionEncoding::PerActionModels => self.embedded_dim(),
        }
    }

    pub fn joint_action(&self, stage: usize, action: usize) -> usize {
        self.action_offsets[stage] + action
    }

    /// Places `state` in block `stage`, zeros elsewhere, then the indicator.
    pub fn embed(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>> {
        if stage >= self.num_stages() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} out of range"
            )));
        }
        check_dim("flattened state", self.state_dims[stage], state.len())?;
        let mut out = vec![0.0; self.embedded_dim()];
        let o = self.block_offsets[stage];
        out[o..o + state.len()].copy_from_slice(state);
        if self.indicator_dim > 0 {
            out[self.joint_state_dim + stage] = 1.0;
        }
        Ok(out)
    }

    fn with_action(&self, embedded: &[f64], joint_action: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(embedded);
        x.resize(self.input_dim(), 0.0);
        x[self.embedded_dim() + joint_action] = 1.0;
        x
    }
}

/// Joint Q-function over the flattened space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattenedQ {
    pub problem: FlattenedProblem,
    /// One model for `OneHot`, one per joint action for `PerActionModels`.
    pub models: Vec<FittedModel>,
}

impl FlattenedQ {
    fn zeros(problem: FlattenedProblem) -> Self {
        let n = match problem.encoding {
            FlatActionEncoding::OneHot => 1,
            FlatActionEncoding::PerActionModels => problem.joint_action_count,
        };
        let models = vec![FittedModel::constant(problem.input_dim(), 0.0); n];
        Self { problem, models }
    }

    fn eligible_values(&self, stage: usize, embedded: &[f64]) -> Result<Vec<f64>> {
        let p = &self.problem;
        (0..p.action_counts[stage])
            .map(|a| {
                let j = p.joint_action(stage, a);
                match p.encoding {
                    FlatActionEncoding::OneHot => {
                        self.models[0].predict(&p.with_action(embedded, j))
                    }
                    FlatActionEncoding::PerActionModels => self.models[j].predict(embedded),
                }
            })
            .collect()
    }

    /// Values of stage `stage`'s action block at `state`.
    pub fn stage_values(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>> {
        let e = self.problem.embed(stage, state)?;
        self.eligible_values(stage, &e)
    }

    /// Greedy policy restricted to each stage's action block.
    pub fn greedy_policy(self: &Arc<Self>) -> PolicyVector {
        PolicyVector::new(
            (0..self.problem.num_stages())
                .map(|k| {
                    StagePolicy::Greedy(Arc::new(StageView {
                        q: self.clone(),
                        stage: k,
                    }))
                })
                .collect(),
        )
    }
}

struct StageView {
    q: Arc<FlattenedQ>,
    stage: usize,
}

impl ActionValues for StageView {
    fn action_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.q.stage_values(self.stage, state)
    }
}

/// A pooled transition with its bootstrap point precomputed.
struct FlatRow {
    stage: usize,
    joint_action: usize,
    reward: f64,
    input: Vec<f64>,
    next_stage: usize,
    next_embedded: Vec<f64>,
    discount: f64,
}

/// Flattened FQI; also reports each iteration's targets to `observe`.
pub fn train_flattened_fqi_with(
    datasets: &[StageDataset],
    env: &dyn CyclicEnv,
    config: &TrainConfig,
    flat: FlattenedConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<(Arc<FlattenedQ>, PolicyVector)> {
    config.validate()?;
    let stages = env.stages();
    check_dim("stage datasets", stages.len(), datasets.len())?;
    let problem = build_flattened_problem(stages, flat);
    let mut rows = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        if ds.is_empty() {
            return Err(Error::EmptyData(format!("no transitions for stage {k}")));
        }
        ds.validate(stages)?;
        for t in &ds.transitions {
            let (next_stage, next_state, discount) = if t.terminal {
                let next = env.next_stage(k);
                (
                    next,
                    env.stage_transition(k, &t.next_state),
                    stages[k].discount,
                )
            } else {
                (k, t.next_state.clone(), 1.0)
            };
            let embedded = problem.embed(k, &t.state)?;
            let joint_action = problem.joint_action(k, t.action);
            let input = match problem.encoding {
                FlatActionEncoding::OneHot => problem.with_action(&embedded, joint_action),
                FlatActionEncoding::PerActionModels => embedded,
            };
            rows.push(FlatRow {
                stage: k,
                joint_action,
                reward: t.reward,
                input,
                next_stage,
                next_embedded: problem.embed(next_stage, &next_state)?,
                discount,
            });
        }
    }
    let clip = if config.clip_targets {
        Some(crate::mdp::value_upper_bound(stages)?)
    } else {
        None
    };

    let mut q = FlattenedQ::zeros(problem.clone());
    for m in 1..=config.iterations {
        let targets = rows
            .par_iter()
            .map(|r| {
                let vals = q.eligible_values(r.next_stage, &r.next_embedded)?;
                let v = vals[argmax(&vals)];
                let y = if r.discount == 1.0 {
                    r.reward + v
                } else {
                    r.reward + r.discount * v
                };
                Ok(clip.map_or(y, |c| y.clamp(-c, c)))
            })
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| Error::Training {
                iteration: m,
                stage: usize::MAX,
                source: Box::new(e),
            })?;
        observe(m, &targets);
        let models = match problem.encoding {
            FlatActionEncoding::OneHot => {
                let inputs: Vec<Vec<f64>> = rows.iter().map(|r| r.input.clone()).collect();
                let mut r = rng::stream(rng::derive_seed(config.seed, &[m as u64, u64::MAX]));
                vec![
                    regressors::fit(&config.regressor, &inputs, &targets, &mut r).map_err(|e| {
                        Error::Training {
                            iteration: m,
                            stage: usize::MAX,
                            source: Box::new(e),
                        }
                    })?,
                ]
            }
            FlatActionEncoding::PerActionModels => (0..problem.joint_action_count)
                .into_par_iter()
                .map(|j| {
                    let stage = problem.action_offsets.partition_point(|&o| o <= j) - 1;
                    let action = j - problem.action_offsets[stage];
                    let (inputs, ys): (Vec<Vec<f64>>, Vec<f64>) = rows
                        .iter()
                        .zip(&targets)
                        .filter(|(r, _)| r.joint_action == j)
                        .map(|(r, &y)| (r.input.clone(), y))
                        .unzip();
                    if inputs.is_empty() {
                        return Ok(FittedModel::constant(problem.input_dim(), 0.0));
                    }
                    let mut r = rng::stream(fit_seed(config.seed, m, stage, action));
                    regressors::fit(&config.regressor, &inputs, &ys, &mut r).map_err(|e| {
                        Error::Training {
                            iteration: m,
                            stage,
                            source: Box::new(e),
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        q = FlattenedQ {
            problem: problem.clone(),
            models,
        };
    }
    debug_assert!(rows.iter().all(|r| r.stage < problem.num_stages()));
    let q = Arc::new(q);
    let policy = q.greedy_policy();
    Ok((q, policy))
}

pub fn train_flattened_fqi(
    datasets: &[StageDataset],
    env: &dyn CyclicEnv,
    config: &TrainConfig,
    flat: FlattenedConfig,
) -> Result<(Arc<FlattenedQ>, PolicyVector)> {
    train_flattened_fqi_with(datasets, env, config, flat, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tabular::{FiniteCyclicMdp, LayeredStage};
    use crate::regressors::RegressorSpec;
    use crate::rng::stream;

    fn spec(d: usize, a: usize) -> StageSpec {
        StageSpec::new(d, a, 1, 0.9).unwrap()
    }

    #[test]
    fn layout_examples() {
        let p = build_flattened_problem(
            &[spec(1, 2), spec(2, 2), spec(2, 2)],
            FlattenedConfig::default(),
        );
        assert_eq!(p.joint_state_dim, 5);
        assert_eq!(p.embedded_dim(), 8);
        assert_eq!(
            p.embed(1, &[3.0, 4.0]).unwrap(),
            vec![0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );

        let p = build_flattened_problem(
            &[spec(1, 4), spec(1, 8), spec(1, 8), spec(1, 6)],
            FlattenedConfig::default(),
        );
        assert_eq!(p.joint_action_count, 26);
        assert_eq!(p.action_offsets, vec![0, 4, 12, 20]);

        let p = build_flattened_problem(&[spec(3, 2)], FlattenedConfig::default());
        assert_eq!(p.embed(0, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_rewards_give_zero_q() {
        let layer = LayeredStage {
            width: 2,
            horizon: 2,
            actions: 2,
            discount: 0.9,
            early_exit: 0.5,
            reward_range: (0.0, 0.0),
        };
        let mdp =
            FiniteCyclicMdp::random_layered(&[layer.clone(), layer], true, &mut stream(3)).unwrap();
        let data = mdp.exhaustive_dataset().unwrap();
        let cfg = TrainConfig::new(5, RegressorSpec::Tabular { default_value: 0.0 });
        let (q, policy) =
            train_flattened_fqi(&data, &mdp, &cfg, FlattenedConfig::default()).unwrap();
        for k in 0..2 {
            assert!(q.stage_values(k, &[0.0]).unwrap().iter().all(|&v| v == 0.0));
            assert_eq!(policy.probs(k, &[0.0]).unwrap().len(), 2);
        }
    }
}
