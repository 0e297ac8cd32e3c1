//! Cyclic MDP abstractions: stage specifications, the environment trait,
//! offline transitions, constrained Bellman targets and Monte Carlo
//! evaluation.
//!
//! Stages are indexed from 0 in code and in files. The successor of stage
//! `k` is `(k + 1) % K`.

pub mod contraction;
mod policy;
pub mod tabular;

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;

pub use policy::{
    argmax, check_normalized, constrained_state_value, ActionValues, PolicyConstraints, PolicyKind,
    PolicyVector, ProbabilityFn, StagePolicy, UpdateSet, NORMALIZATION_TOL,
};

/// Static description of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub state_dim: usize,
    pub action_count: usize,
    pub horizon: usize,
    pub discount: f64,
    /// Informational bound on per-step rewards.
    pub reward_max: f64,
    /// Dimension of the post-terminal state handed to the stage map.
    /// Equals `state_dim` unless the environment exits into another space.
    pub exit_dim: usize,
}

impl StageSpec {
    pub fn new(
        state_dim: usize,
        action_count: usize,
        horizon: usize,
        discount: f64,
    ) -> Result<Self> {
        let spec = Self {
            state_dim,
            action_count,
            horizon,
            discount,
            reward_max: 0.0,
            exit_dim: state_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_reward_max(mut self, reward_max: f64) -> Self {
        self.reward_max = reward_max;
        self
    }

    pub fn with_exit_dim(mut self, exit_dim: usize) -> Self {
        self.exit_dim = exit_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_count == 0 || self.horizon == 0 || self.exit_dim == 0
        {
            return Err(Error::InvalidArgument(format!(
                "stage dimensions must be positive: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::InvalidArgument(format!(
                "discount {} outside [0, 1]",
                self.discount
            )));
        }
        if !(self.reward_max >= 0.0) {
            return Err(Error::InvalidArgument(
                "reward_max must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A K-stage cyclic environment.
///
/// Implementations must be pure given the randomness stream; they are shared
/// across threads.
pub trait CyclicEnv: Send + Sync {
    fn stages(&self) -> &[StageSpec];

    /// Whether `(state, action)` belongs to the stage's terminal set.
    fn is_terminal(&self, stage: usize, state: &[f64], action: usize) -> bool;

    /// Deterministic map from a post-terminal state of `stage` into the
    /// initial state space of the successor stage.
    fn stage_transition(&self, stage: usize, exit_state: &[f64]) -> Vec<f64>;

    /// One within-stage step: returns `(reward, next_state)`.
    fn step(
        &self,
        stage: usize,
        state: &[f64],
        action: usize,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>);

    /// Draw from the stage's initial distribution.
    fn sample_initial(&self, stage: usize, rng: &mut dyn RngCore) -> Vec<f64>;

    fn num_stages(&self) -> usize {
        self.stages().len()
    }

    fn action_counts(&self) -> Vec<usize> {
        self.stages().iter().map(|s| s.action_count).collect()
    }

    fn next_stage(&self, stage: usize) -> usize {
        (stage + 1) % self.num_stages()
    }
}

/// Checks the structural invariants of an environment.
pub fn validate_env(env: &dyn CyclicEnv) -> Result<()> {
    let stages = env.stages();
    if stages.is_empty() {
        return Err(Error::InvalidArgument(
            "an environment needs at least one stage".into(),
        ));
    }
    for s in stages {
        s.validate()?;
    }
    if stages.iter().all(|s| s.discount >= 1.0) {
        return Err(Error::InvalidArgument(
            "at least one stage discount must be below 1".into(),
        ));
    }
    Ok(())
}

/// One-based cyclic stage index `((m - 1) mod K) + 1`.
pub fn cycle_index(m: usize, num_stages: usize) -> Result<usize> {
    if m == 0 || num_stages == 0 {
        return Err(Error::InvalidArgument(format!(
            "cycle_index needs m >= 1 and K >= 1 (got m = {m}, K = {num_stages})"
        )));
    }
    Ok((m - 1) % num_stages + 1)
}

/// Product of all stage discounts; errors when it equals 1.
pub fn cycle_discount(stages: &[StageSpec]) -> Result<f64> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no stages".into()));
    }
    let g: f64 = stages.iter().map(|s| s.discount).product();
    if g >= 1.0 {
        return Err(Error::InvalidArgument(
            "every stage discount is 1; returns are unbounded".into(),
        ));
    }
    Ok(g)
}

/// `Y = (sum_k H_k R_max,k) / (1 - cycle discount)`.
pub fn value_upper_bound(stages: &[StageSpec]) -> Result<f64> {
    let g = cycle_discount(stages)?;
    let per_cycle: f64 = stages.iter().map(|s| s.horizon as f64 * s.reward_max).sum();
    Ok(per_cycle / (1.0 - g))
}

/// An offline transition tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub stage: usize,
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// Post-step state before any stage map is applied.
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn validate(&self, stages: &[StageSpec]) -> Result<()> {
        let spec = stages.get(self.stage).ok_or_else(|| {
            Error::InvalidArgument(format!("transition stage {} out of range", self.stage))
        })?;
        check_dim("transition state", spec.state_dim, self.state.len())?;
        let next_dim = if self.terminal {
            spec.exit_dim
        } else {
            spec.state_dim
        };
        check_dim("transition next_state", next_dim, self.next_state.len())?;
        if self.action >= spec.action_count {
            return Err(Error::ActionOutOfRange {
                stage: self.stage,
                action: self.action,
                count: spec.action_count,
            });
        }
        Ok(())
    }
}

/// Transitions collected during one stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDataset {
    pub stage: usize,
    pub transitions: Vec<Transition>,
}

impl StageDataset {
    pub fn new(stage: usize) -> Self {
        Self {
            stage,
            transitions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn validate(&self, stages: &[StageSpec]) -> Result<()> {
        for t in &self.transitions {
            if t.stage != self.stage {
                return Err(Error::InvalidArgument(format!(
                    "transition for stage {} stored in dataset of stage {}",
                    t.stage, self.stage
                )));
            }
            t.validate(stages)?;
        }
        Ok(())
    }
}

/// Groups a flat list of transitions into one dataset per stage.
pub fn split_by_stage(
    num_stages: usize,
    transitions: Vec<Transition>,
) -> Result<Vec<StageDataset>> {
    let mut out: Vec<StageDataset> = (0..num_stages).map(StageDataset::new).collect();
    for t in transitions {
        let k = t.stage;
        out.get_mut(k)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {k} out of range")))?
            .transitions
            .push(t);
    }
    Ok(out)
}

/// Evaluates action values for every stage; the `Q` argument of a Bellman backup.
pub trait QEvaluator: Send + Sync {
    fn q_values(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>>;
}

/// Regression target of one transition under the constrained Bellman operator.
///
/// Non-terminal transitions bootstrap from their own stage at `s'`; terminal
/// ones from the successor stage at `phi_k(s')`, discounted by `gamma_k`.
pub fn bellman_target(
    tr: &Transition,
    q: &dyn QEvaluator,
    env: &dyn CyclicEnv,
    constraints: &PolicyConstraints,
) -> Result<f64> {
    let k = tr.stage;
    if !tr.terminal {
        let qv = q.q_values(k, &tr.next_state)?;
        let v = constraints.state_value(k, &tr.next_state, &qv)?;
        return Ok(tr.reward + v);
    }
    let next = env.next_stage(k);
    let entry = env.stage_transition(k, &tr.next_state);
    check_dim(
        "stage transition output",
        env.stages()[next].state_dim,
        entry.len(),
    )?;
    let qv = q.q_values(next, &entry)?;
    let v = constraints.state_value(next, &entry, &qv)?;
    Ok(tr.reward + env.stages()[k].discount * v)
}

/// Result of one simulated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutOutcome {
    /// Sum of stage rewards weighted by the cumulative exit discounts.
    pub discounted_return: f64,
    /// Undiscounted sum of all rewards.
    pub total_reward: f64,
    pub decisions: usize,
    pub forced_terminations: usize,
}

static FORCED_TERMINATION_WARNED: AtomicBool = AtomicBool::new(false);

/// Simulates `num_cycles` full cycles starting at `start_stage`.
pub fn simulate(
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    start_stage: usize,
    start_state: &[f64],
    num_cycles: usize,
    rng: &mut dyn RngCore,
) -> Result<RolloutOutcome> {
    let stages = env.stages();
    let num_stages = stages.len();
    if start_stage >= num_stages {
        return Err(Error::InvalidArgument(format!(
            "start stage {start_stage} out of range"
        )));
    }
    check_dim("policy stages", num_stages, policy.num_stages())?;
    check_dim(
        "rollout start state",
        stages[start_stage].state_dim,
        start_state.len(),
    )?;

    let mut out = RolloutOutcome::default();
    let mut discount = 1.0;
    let mut state = start_state.to_vec();
    for visit in 0..num_cycles * num_stages {
        let k = (start_stage + visit) % num_stages;
        let spec = &stages[k];
        let mut stage_reward = 0.0;
        let mut steps = 0;
        loop {
            steps += 1;
            let action = policy.sample(k, &state, rng)?;
            if action >= spec.action_count {
                return Err(Error::ActionOutOfRange {
                    stage: k,
                    action,
                    count: spec.action_count,
                });
            }
            let mut terminal = env.is_terminal(k, &state, action);
            if !terminal && steps >= spec.horizon {
                terminal = true;
                out.forced_terminations += 1;
                if !FORCED_TERMINATION_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "stage {k} did not terminate within its horizon {}; forcing exit",
                        spec.horizon
                    );
                }
            }
            let (reward, next) = env.step(k, &state, action, rng);
            out.decisions += 1;
            stage_reward += reward;
            if terminal {
                out.discounted_return += discount * stage_reward;
                out.total_reward += stage_reward;
                discount *= spec.discount;
                let entry = env.stage_transition(k, &next);
                check_dim(
                    "stage transition output",
                    stages[(k + 1) % num_stages].state_dim,
                    entry.len(),
                )?;
                state = entry;
                break;
            }
            check_dim("step output", spec.state_dim, next.len())?;
            state = next;
        }
    }
    Ok(out)
}

/// Discounted return of one trajectory truncated after `num_cycles` cycles.
pub fn rollout(
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    start_stage: usize,
    start_state: &[f64],
    num_cycles: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    simulate(env, policy, start_stage, start_state, num_cycles, rng).map(|o| o.discounted_return)
}

/// Mean and standard error of a Monte Carlo value estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trajectories: usize,
}

/// Monte Carlo estimate of `E_{s ~ eta_k}[V^pi_k(s)]`.
///
/// One seed is drawn from `rng`; trajectory `i` runs on a child stream of
/// that seed, so the result does not depend on thread scheduling.
pub fn monte_carlo_estimate(
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    stage: usize,
    num_trajectories: usize,
    num_cycles: usize,
    rng: &mut dyn RngCore,
) -> Result<MonteCarloEstimate> {
    if num_trajectories == 0 {
        return Err(Error::InvalidArgument(
            "need at least one trajectory".into(),
        ));
    }
    let base: u64 = rng.random();
    let returns: Vec<f64> = (0..num_trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::child_stream(base, &[i]);
            let s0 = env.sample_initial(stage, &mut r);
            rollout(env, policy, stage, &s0, num_cycles, &mut r)
        })
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if returns.len() > 1 {
        returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
        trajectories: returns.len(),
    })
}

pub fn monte_carlo_value(
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    stage: usize,
    num_trajectories: usize,
    num_cycles: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    monte_carlo_estimate(env, policy, stage, num_trajectories, num_cycles, rng).map(|e| e.mean)
}

/// Number of cycles after which the remaining discounted mass is below `tol`.
pub fn cycles_for_tolerance(stages: &[StageSpec], tol: f64) -> Result<usize> {
    let g = cycle_discount(stages)?;
    if g == 0.0 {
        return Ok(1);
    }
    Ok(((tol.ln() / g.ln()).ceil().max(1.0)) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cycle_index_examples() {
        assert_eq!(cycle_index(1, 3).unwrap(), 1);
        assert_eq!(cycle_index(4, 3).unwrap(), 1);
        assert_eq!(cycle_index(6, 4).unwrap(), 2);
        assert!(cycle_index(0, 3).is_err());
        assert!(cycle_index(3, 0).is_err());
    }

    fn stages(gammas: &[f64]) -> Vec<StageSpec> {
        gammas
            .iter()
            .map(|&g| StageSpec::new(1, 1, 1, g).unwrap())
            .collect()
    }

    #[test]
    fn cycle_discount_examples() {
        assert!((cycle_discount(&stages(&[1.0, 1.0, 1.0, 0.9])).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(cycle_discount(&stages(&[0.5, 0.5])).unwrap(), 0.25);
        assert!(cycle_discount(&stages(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn value_upper_bound_examples() {
        let one = vec![StageSpec::new(1, 1, 1, 0.5).unwrap().with_reward_max(1.0)];
        assert_eq!(value_upper_bound(&one).unwrap(), 2.0);
        let two = vec![
            StageSpec::new(1, 1, 2, 1.0).unwrap().with_reward_max(1.0),
            StageSpec::new(1, 1, 3, 0.5).unwrap().with_reward_max(2.0),
        ];
        assert_eq!(value_upper_bound(&two).unwrap(), 16.0);
        assert_eq!(value_upper_bound(&stages(&[0.3, 0.9])).unwrap(), 0.0);
    }

    #[test]
    fn stage_spec_validation() {
        assert!(StageSpec::new(0, 1, 1, 0.5).is_err());
        assert!(StageSpec::new(1, 0, 1, 0.5).is_err());
        assert!(StageSpec::new(1, 1, 0, 0.5).is_err());
        assert!(StageSpec::new(1, 1, 1, 1.5).is_err());
        assert!(StageSpec::new(1, 1, 1, -0.1).is_err());
    }

    /// K = 1, H = 1, constant reward 1.
    struct Constant {
        stages: Vec<StageSpec>,
        reward: f64,
        terminal: bool,
    }

    impl CyclicEnv for Constant {
        fn stages(&self) -> &[StageSpec] {
            &self.stages
        }
        fn is_terminal(&self, _: usize, _: &[f64], _: usize) -> bool {
            self.terminal
        }
        fn stage_transition(&self, _: usize, s: &[f64]) -> Vec<f64> {
            s.to_vec()
        }
        fn step(&self, _: usize, s: &[f64], _: usize, _: &mut dyn RngCore) -> (f64, Vec<f64>) {
            (self.reward, s.to_vec())
        }
        fn sample_initial(&self, _: usize, _: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0]
        }
    }

    #[test]
    fn rollout_geometric_sum() {
        let env = Constant {
            stages: stages(&[0.9]),
            reward: 1.0,
            terminal: true,
        };
        let pi = PolicyVector::uniform(&[1]);
        let mut rng = stream(1);
        let v = rollout(&env, &pi, 0, &[0.0], 30, &mut rng).unwrap();
        assert!((v - (1.0 - 0.9f64.powi(30)) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn rollout_zero_rewards() {
        let env = Constant {
            stages: stages(&[0.9]),
            reward: 0.0,
            terminal: true,
        };
        let pi = PolicyVector::uniform(&[1]);
        let mut rng = stream(1);
        assert_eq!(rollout(&env, &pi, 0, &[0.0], 10, &mut rng).unwrap(), 0.0);
        assert_eq!(
            monte_carlo_value(&env, &pi, 0, 7, 10, &mut rng).unwrap(),
            0.0
        );
    }

    #[test]
    fn rollout_forces_termination_at_horizon() {
        let env = Constant {
            stages: vec![StageSpec::new(1, 1, 3, 0.5).unwrap()],
            reward: 1.0,
            terminal: false,
        };
        let pi = PolicyVector::uniform(&[1]);
        let mut rng = stream(1);
        let out = simulate(&env, &pi, 0, &[0.0], 2, &mut rng).unwrap();
        assert_eq!(out.decisions, 6);
        assert_eq!(out.forced_terminations, 2);
        assert_eq!(out.discounted_return, 3.0 + 0.5 * 3.0);
        assert_eq!(out.total_reward, 6.0);
    }

    #[test]
    fn rollout_rejects_bad_inputs() {
        let env = Constant {
            stages: stages(&[0.9]),
            reward: 1.0,
            terminal: true,
        };
        let mut rng = stream(1);
        let pi = PolicyVector::uniform(&[1]);
        assert!(rollout(&env, &pi, 0, &[0.0, 1.0], 1, &mut rng).is_err());
        let bad = PolicyVector::new(vec![StagePolicy::Fixed {
            actions: 1,
            probs: std::sync::Arc::new(|_| vec![0.5]),
        }]);
        assert!(matches!(
            rollout(&env, &bad, 0, &[0.0], 1, &mut rng),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn transition_validation() {
        let specs = vec![StageSpec::new(2, 3, 1, 0.5).unwrap().with_exit_dim(1)];
        let mut t = Transition {
            stage: 0,
            state: vec![0.0, 1.0],
            action: 2,
            reward: 1.0,
            next_state: vec![0.5],
            terminal: true,
        };
        t.validate(&specs).unwrap();
        t.terminal = false;
        assert!(t.validate(&specs).is_err());
        t.terminal = true;
        t.action = 3;
        assert!(matches!(
            t.validate(&specs),
            Err(Error::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn cycles_for_tolerance_covers_tail() {
        let s = stages(&[0.9]);
        let c = cycles_for_tolerance(&s, 1e-6).unwrap();
        assert!(0.9f64.powi(c as i32) <= 1e-6);
        assert!(0.9f64.powi(c as i32 - 1) > 1e-6);
    }
}
