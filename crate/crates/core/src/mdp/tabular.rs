//! Finite cyclic MDPs with explicit tables.
//!
//! Used as exact oracles: one application of the constrained Bellman
//! operator, its fixed point, and exact policy evaluation. States are encoded
//! as one-element vectors `[s as f64]` when a finite MDP is driven through
//! [`CyclicEnv`].

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{
    argmax, cycle_discount, CyclicEnv, PolicyConstraints, PolicyVector, QEvaluator, StageDataset,
    StageSpec, Transition,
};
use crate::error::{check_dim, Error, Result};

/// Per-stage tables `q[k][s][a]`.
pub type QTables = Vec<Vec<Vec<f64>>>;

/// One stage of a finite cyclic MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteStage {
    pub horizon: usize,
    pub discount: f64,
    /// `transitions[s][a][s']`; post-states live in this stage's state space.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Expected immediate reward `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub terminal: Vec<Vec<bool>>,
    /// Stage map: post-terminal state of this stage to a state of the successor.
    pub stage_map: Vec<usize>,
    /// Initial distribution over this stage's states.
    pub initial: Vec<f64>,
}

impl FiniteStage {
    pub fn num_states(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_actions(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }
}

/// A finite cyclic MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteCyclicMdp {
    stages: Vec<FiniteStage>,
    specs: Vec<StageSpec>,
}

/// Switches used by negative controls of the contraction battery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OperatorOptions {
    /// Treat every exit discount as 1.
    pub ignore_discount: bool,
}

const ROW_TOL: f64 = 1e-10;

impl FiniteCyclicMdp {
    pub fn new(stages: Vec<FiniteStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("no stages".into()));
        }
        let num_stages = stages.len();
        let mut specs = Vec::with_capacity(num_stages);
        for (k, st) in stages.iter().enumerate() {
            let ns = st.num_states();
            let na = st.num_actions();
            let next_states = stages[(k + 1) % num_stages].num_states();
            if ns == 0 || na == 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {k} has no states or actions"
                )));
            }
            check_dim("terminal table rows", ns, st.terminal.len())?;
            check_dim("transition table rows", ns, st.transitions.len())?;
            check_dim("stage map", ns, st.stage_map.len())?;
            check_dim("initial distribution", ns, st.initial.len())?;
            for s in 0..ns {
                check_dim("reward table columns", na, st.rewards[s].len())?;
                check_dim("terminal table columns", na, st.terminal[s].len())?;
                check_dim("transition table actions", na, st.transitions[s].len())?;
                for a in 0..na {
                    let row = &st.transitions[s][a];
                    check_dim("transition row", ns, row.len())?;
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > ROW_TOL {
                        return Err(Error::InvalidArgument(format!(
                            "transition row (stage {k}, state {s}, action {a}) is not stochastic (sum {sum})"
                        )));
                    }
                }
            }
            if let Some(&bad) = st.stage_map.iter().find(|&&t| t >= next_states) {
                return Err(Error::InvalidArgument(format!(
                    "stage {k} maps to state {bad} but the successor has {next_states} states"
                )));
            }
            let reward_max = st
                .rewards
                .iter()
                .flatten()
                .fold(0.0f64, |m, r| m.max(r.abs()));
            specs.push(StageSpec::new(1, na, st.horizon, st.discount)?.with_reward_max(reward_max));
        }
        cycle_discount(&specs)?;
        Ok(Self { stages, specs })
    }

    /// Random layered MDP: stage `k` has `horizon` layers of `width` states;
    /// non-terminal pairs move one layer down, the last layer is always
    /// terminal, so every visit ends within the horizon.
    pub fn random_layered(
        configs: &[LayeredStage],
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let num_stages = configs.len();
        let mut stages = Vec::with_capacity(num_stages);
        for (k, c) in configs.iter().enumerate() {
            let next_width = configs[(k + 1) % num_stages].width;
            let ns = c.width * c.horizon;
            let mut transitions = vec![vec![vec![0.0; ns]; c.actions]; ns];
            let mut rewards = vec![vec![0.0; c.actions]; ns];
            let mut terminal = vec![vec![false; c.actions]; ns];
            for s in 0..ns {
                let layer = s / c.width;
                for a in 0..c.actions {
                    rewards[s][a] = rng.random_range(c.reward_range.0..=c.reward_range.1);
                    let term = layer + 1 == c.horizon || rng.random::<f64>() < c.early_exit;
                    terminal[s][a] = term;
                    // Terminal pairs land anywhere in the first layer; the stage map handles the rest.
                    let target_layer = if term { 0 } else { layer + 1 };
                    let row = &mut transitions[s][a];
                    let base = target_layer * c.width;
                    if deterministic {
                        row[base + rng.random_range(0..c.width)] = 1.0;
                    } else {
                        let w: Vec<f64> =
                            (0..c.width).map(|_| rng.random::<f64>() + 0.05).collect();
                        let total: f64 = w.iter().sum();
                        for (j, wj) in w.iter().enumerate() {
                            row[base + j] = wj / total;
                        }
                        let sum: f64 = row.iter().sum();
                        row[base] += 1.0 - sum;
                    }
                }
            }
            let stage_map = (0..ns).map(|s| (s * 7 + k) % next_width).collect();
            let mut initial = vec![0.0; ns];
            for p in initial.iter_mut().take(c.width) {
                *p = 1.0 / c.width as f64;
            }
            stages.push(FiniteStage {
                horizon: c.horizon,
                discount: c.discount,
                transitions,
                rewards,
                terminal,
                stage_map,
                initial,
            });
        }
        Self::new(stages)
    }

    pub fn stage(&self, k: usize) -> &FiniteStage {
        &self.stages[k]
    }

    pub fn finite_stages(&self) -> &[FiniteStage] {
        &self.stages
    }

    pub fn is_deterministic(&self) -> bool {
        self.stages.iter().all(|st| {
            st.transitions
                .iter()
                .flatten()
                .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
        })
    }

    /// Sum of stage horizons.
    pub fn total_horizon(&self) -> usize {
        self.stages.iter().map(|s| s.horizon).sum()
    }

    pub fn zero_tables(&self) -> QTables {
        self.stages
            .iter()
            .map(|st| vec![vec![0.0; st.num_actions()]; st.num_states()])
            .collect()
    }

    /// One transition per (stage, state, action) with the deterministic successor.
    pub fn exhaustive_dataset(&self) -> Result<Vec<StageDataset>> {
        if !self.is_deterministic() {
            return Err(Error::InvalidArgument(
                "exhaustive datasets require deterministic transitions".into(),
            ));
        }
        Ok(self
            .stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                let mut ds = StageDataset::new(k);
                for s in 0..st.num_states() {
                    for a in 0..st.num_actions() {
                        let next = st.transitions[s][a]
                            .iter()
                            .position(|&p| p == 1.0)
                            .unwrap_or(0);
                        ds.transitions.push(Transition {
                            stage: k,
                            state: vec![s as f64],
                            action: a,
                            reward: st.rewards[s][a],
                            next_state: vec![next as f64],
                            terminal: st.terminal[s][a],
                        });
                    }
                }
                ds
            })
            .collect())
    }

    fn check_tables(&self, q: &QTables) -> Result<()> {
        check_dim("q tables stages", self.stages.len(), q.len())?;
        for (st, qk) in self.stages.iter().zip(q) {
            check_dim("q table states", st.num_states(), qk.len())?;
            for row in qk {
                check_dim("q table actions", st.num_actions(), row.len())?;
            }
        }
        Ok(())
    }

    /// `V_k(s)` for every stage and state: max on the update set, fixed-policy
    /// expectation elsewhere.
    fn constrained_values(
        &self,
        q: &QTables,
        constraints: &PolicyConstraints,
    ) -> Result<Vec<Vec<f64>>> {
        let mut values = Vec::with_capacity(q.len());
        for (k, qk) in q.iter().enumerate() {
            let mut vk = Vec::with_capacity(qk.len());
            for (s, row) in qk.iter().enumerate() {
                let v = if constraints.update_set().contains(k) {
                    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    let pi = constraints
                        .fixed_policy(k)
                        .ok_or(Error::MissingFixedPolicy { stage: k })?
                        .probs(&[s as f64])?;
                    pi.iter().zip(row).map(|(p, x)| p * x).sum()
                };
                vk.push(v);
            }
            values.push(vk);
        }
        Ok(values)
    }

    fn backup(&self, q: &QTables, values: &[Vec<f64>], opts: OperatorOptions) -> QTables {
        let num_stages = self.stages.len();
        let mut out = self.zero_tables();
        for (k, st) in self.stages.iter().enumerate() {
            let next = (k + 1) % num_stages;
            let gamma = if opts.ignore_discount {
                1.0
            } else {
                st.discount
            };
            for s in 0..st.num_states() {
                for a in 0..st.num_actions() {
                    let row = &st.transitions[s][a];
                    let cont: f64 = if st.terminal[s][a] {
                        gamma
                            * row
                                .iter()
                                .enumerate()
                                .map(|(sp, p)| p * values[next][st.stage_map[sp]])
                                .sum::<f64>()
                    } else {
                        row.iter()
                            .enumerate()
                            .map(|(sp, p)| p * values[k][sp])
                            .sum()
                    };
                    out[k][s][a] = st.rewards[s][a] + cont;
                }
            }
        }
        debug_assert_eq!(out.len(), q.len());
        out
    }

    /// Exact application of the constrained Bellman operator.
    pub fn apply_bellman_operator(
        &self,
        q: &QTables,
        constraints: &PolicyConstraints,
    ) -> Result<QTables> {
        self.apply_bellman_operator_with(q, constraints, OperatorOptions::default())
    }

    pub fn apply_bellman_operator_with(
        &self,
        q: &QTables,
        constraints: &PolicyConstraints,
        opts: OperatorOptions,
    ) -> Result<QTables> {
        self.check_tables(q)?;
        check_dim(
            "constraint stages",
            self.stages.len(),
            constraints.num_stages(),
        )?;
        let values = self.constrained_values(q, constraints)?;
        Ok(self.backup(q, &values, opts))
    }

    /// Fixed point of the constrained operator by repeated application.
    pub fn value_iteration(
        &self,
        constraints: &PolicyConstraints,
        tol: f64,
        max_iter: usize,
    ) -> Result<QTables> {
        let mut q = self.zero_tables();
        for _ in 0..max_iter {
            let next = self.apply_bellman_operator(&q, constraints)?;
            let diff = sup_distance(&next, &q);
            q = next;
            if diff <= tol {
                break;
            }
        }
        Ok(q)
    }

    /// `Q^pi` for a composite policy, by iterating its evaluation operator.
    pub fn evaluate_policy(
        &self,
        policy: &PolicyVector,
        tol: f64,
        max_iter: usize,
    ) -> Result<QTables> {
        check_dim("policy stages", self.stages.len(), policy.num_stages())?;
        let probs: Vec<Vec<Vec<f64>>> = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                (0..st.num_states())
                    .map(|s| policy.probs(k, &[s as f64]))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let mut q = self.zero_tables();
        for _ in 0..max_iter {
            let values: Vec<Vec<f64>> = q
                .iter()
                .zip(&probs)
                .map(|(qk, pk)| {
                    qk.iter()
                        .zip(pk)
                        .map(|(row, p)| row.iter().zip(p).map(|(x, w)| x * w).sum())
                        .collect()
                })
                .collect();
            let next = self.backup(&q, &values, OperatorOptions::default());
            let diff = sup_distance(&next, &q);
            q = next;
            if diff <= tol {
                break;
            }
        }
        Ok(q)
    }

    /// `E_{s ~ eta_k}[V_k(s)]` for state values `v[k][s]`.
    pub fn initial_value(&self, stage: usize, values: &[f64]) -> f64 {
        self.stages[stage]
            .initial
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// Layout parameters for [`FiniteCyclicMdp::random_layered`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayeredStage {
    pub width: usize,
    pub horizon: usize,
    pub actions: usize,
    pub discount: f64,
    /// Probability that a non-final pair is terminal.
    pub early_exit: f64,
    pub reward_range: (f64, f64),
}

/// Exact one-step application of the constrained Bellman operator.
pub fn apply_bellman_operator_tabular(
    mdp: &FiniteCyclicMdp,
    q: &QTables,
    constraints: &PolicyConstraints,
) -> Result<QTables> {
    mdp.apply_bellman_operator(q, constraints)
}

/// Sup-norm distance between two table vectors of equal shape.
pub fn sup_distance(a: &QTables, b: &QTables) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Greedy state values `max_a q[k][s][a]` restricted by a policy vector.
pub fn policy_state_values(q: &QTables, policy: &PolicyVector) -> Result<Vec<Vec<f64>>> {
    q.iter()
        .enumerate()
        .map(|(k, qk)| {
            qk.iter()
                .enumerate()
                .map(|(s, row)| {
                    let p = policy.probs(k, &[s as f64])?;
                    Ok(p.iter().zip(row).map(|(w, x)| w * x).sum())
                })
                .collect()
        })
        .collect()
}

/// Q tables used directly as an evaluator.
#[derive(Debug, Clone)]
pub struct TableEvaluator(pub QTables);

impl QEvaluator for TableEvaluator {
    fn q_values(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>> {
        let s = state_index(state)?;
        self.0
            .get(stage)
            .and_then(|t| t.get(s))
            .cloned()
            .ok_or_else(|| {
                Error::InvalidArgument(format!("state {s} of stage {stage} not in table"))
            })
    }
}

/// Greedy action of a table row, lowest index on ties.
pub fn greedy_action(row: &[f64]) -> usize {
    argmax(row)
}

fn state_index(state: &[f64]) -> Result<usize> {
    check_dim("finite state", 1, state.len())?;
    let x = state[0];
    if !(x >= 0.0) || x.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{x} is not a finite state index"
        )));
    }
    Ok(x as usize)
}

fn sample_row(row: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl CyclicEnv for FiniteCyclicMdp {
    fn stages(&self) -> &[StageSpec] {
        &self.specs
    }

    fn is_terminal(&self, stage: usize, state: &[f64], action: usize) -> bool {
        let s = state[0] as usize;
        self.stages[stage].terminal[s][action]
    }

    fn stage_transition(&self, stage: usize, exit_state: &[f64]) -> Vec<f64> {
        vec![self.stages[stage].stage_map[exit_state[0] as usize] as f64]
    }

    fn step(
        &self,
        stage: usize,
        state: &[f64],
        action: usize,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        let st = &self.stages[stage];
        let s = state[0] as usize;
        let next = sample_row(&st.transitions[s][action], rng);
        (st.rewards[s][action], vec![next as f64])
    }

    fn sample_initial(&self, stage: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![sample_row(&self.stages[stage].initial, rng) as f64]
    }
}
