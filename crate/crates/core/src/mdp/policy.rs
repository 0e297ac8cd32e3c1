use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Something that scores every action of one stage at a state.
pub trait ActionValues: Send + Sync {
    fn action_values(&self, state: &[f64]) -> Result<Vec<f64>>;
}

/// Probability function of a fixed stage policy.
pub type ProbabilityFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Kind tag of a stage policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    GreedyFromQ,
    Fixed,
    UniformRandom,
}

/// Policy for a single stage.
#[derive(Clone)]
pub enum StagePolicy {
    Uniform {
        actions: usize,
    },
    Fixed {
        actions: usize,
        probs: ProbabilityFn,
    },
    Greedy(Arc<dyn ActionValues>),
}

impl fmt::Debug for StagePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StagePolicy::Uniform { actions } => write!(f, "Uniform({actions})"),
            StagePolicy::Fixed { actions, .. } => write!(f, "Fixed({actions})"),
            StagePolicy::Greedy(_) => write!(f, "Greedy"),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn check_normalized(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last supported action.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl StagePolicy {
    /// A deterministic fixed policy.
    pub fn deterministic<F>(actions: usize, choose: F) -> Self
    where
        F: Fn(&[f64]) -> usize + Send + Sync + 'static,
    {
        StagePolicy::Fixed {
            actions,
            probs: Arc::new(move |s| {
                let mut p = vec![0.0; actions];
                p[choose(s).min(actions - 1)] = 1.0;
                p
            }),
        }
    }

    /// A fixed policy with a state-independent distribution.
    pub fn constant(probs: Vec<f64>) -> Result<Self> {
        check_normalized(&probs)?;
        let actions = probs.len();
        Ok(StagePolicy::Fixed {
            actions,
            probs: Arc::new(move |_| probs.clone()),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            StagePolicy::Uniform { .. } => PolicyKind::UniformRandom,
            StagePolicy::Fixed { .. } => PolicyKind::Fixed,
            StagePolicy::Greedy(_) => PolicyKind::GreedyFromQ,
        }
    }

    /// Action distribution at `state`.
    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            StagePolicy::Uniform { actions } => Ok(vec![1.0 / *actions as f64; *actions]),
            StagePolicy::Fixed { actions, probs } => {
                let p = probs(state);
                if p.len() != *actions {
                    return Err(Error::DimensionMismatch {
                        context: "fixed policy output",
                        expected: *actions,
                        actual: p.len(),
                    });
                }
                check_normalized(&p)?;
                Ok(p)
            }
            StagePolicy::Greedy(q) => {
                let values = q.action_values(state)?;
                let mut p = vec![0.0; values.len()];
                p[argmax(&values)] = 1.0;
                Ok(p)
            }
        }
    }

    pub fn sample(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<usize> {
        match self {
            StagePolicy::Uniform { actions } => Ok(rng.random_range(0..*actions)),
            StagePolicy::Greedy(q) => Ok(argmax(&q.action_values(state)?)),
            StagePolicy::Fixed { .. } => Ok(sample_index(&self.probs(state)?, rng)),
        }
    }
}

/// A composite policy, one entry per stage.
#[derive(Clone, Debug)]
pub struct PolicyVector {
    stages: Vec<StagePolicy>,
}

impl PolicyVector {
    pub fn new(stages: Vec<StagePolicy>) -> Self {
        Self { stages }
    }

    pub fn uniform(action_counts: &[usize]) -> Self {
        Self::new(
            action_counts
                .iter()
                .map(|&actions| StagePolicy::Uniform { actions })
                .collect(),
        )
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, stage: usize) -> &StagePolicy {
        &self.stages[stage]
    }

    pub fn kind(&self, stage: usize) -> PolicyKind {
        self.stages[stage].kind()
    }

    pub fn probs(&self, stage: usize, state: &[f64]) -> Result<Vec<f64>> {
        self.stages[stage].probs(state)
    }

    pub fn sample(&self, stage: usize, state: &[f64], rng: &mut dyn RngCore) -> Result<usize> {
        self.stages[stage].sample(state, rng)
    }
}

/// Stages whose policies are optimized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSet {
    num_stages: usize,
    members: BTreeSet<usize>,
}

impl UpdateSet {
    pub fn new(num_stages: usize, members: impl IntoIterator<Item = usize>) -> Result<Self> {
        let members: BTreeSet<usize> = members.into_iter().collect();
        if let Some(&bad) = members.iter().find(|&&k| k >= num_stages) {
            return Err(Error::InvalidArgument(format!(
                "update set member {bad} is not a stage index below {num_stages}"
            )));
        }
        Ok(Self {
            num_stages,
            members,
        })
    }

    pub fn all(num_stages: usize) -> Self {
        Self {
            num_stages,
            members: (0..num_stages).collect(),
        }
    }

    pub fn contains(&self, stage: usize) -> bool {
        self.members.contains(&stage)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }
}

/// An update set together with the fixed policies of the stages outside it.
#[derive(Clone, Debug)]
pub struct PolicyConstraints {
    update_set: UpdateSet,
    fixed: Vec<Option<StagePolicy>>,
}

impl PolicyConstraints {
    pub fn new(update_set: UpdateSet, fixed: Vec<Option<StagePolicy>>) -> Result<Self> {
        if fixed.len() != update_set.num_stages() {
            return Err(Error::DimensionMismatch {
                context: "fixed policy list",
                expected: update_set.num_stages(),
                actual: fixed.len(),
            });
        }
        for (k, f) in fixed.iter().enumerate() {
            if !update_set.contains(k) && f.is_none() {
                return Err(Error::MissingFixedPolicy { stage: k });
            }
        }
        Ok(Self { update_set, fixed })
    }

    /// Optimize every stage.
    pub fn all_stages(num_stages: usize) -> Self {
        Self {
            update_set: UpdateSet::all(num_stages),
            fixed: vec![None; num_stages],
        }
    }

    /// Optimize `members`; every other stage follows a uniform random policy.
    pub fn uniform_outside(update_set: UpdateSet, action_counts: &[usize]) -> Result<Self> {
        let fixed = action_counts
            .iter()
            .enumerate()
            .map(|(k, &actions)| {
                (!update_set.contains(k)).then_some(StagePolicy::Uniform { actions })
            })
            .collect();
        Self::new(update_set, fixed)
    }

    pub fn update_set(&self) -> &UpdateSet {
        &self.update_set
    }

    pub fn num_stages(&self) -> usize {
        self.fixed.len()
    }

    pub fn fixed_policy(&self, stage: usize) -> Option<&StagePolicy> {
        if self.update_set.contains(stage) {
            None
        } else {
            self.fixed[stage].as_ref()
        }
    }

    /// Constrained state value at `state` given the stage's action values.
    pub fn state_value(&self, stage: usize, state: &[f64], q_values: &[f64]) -> Result<f64> {
        match self.fixed_policy(stage) {
            None => constrained_state_value(q_values, stage, &self.update_set, None),
            Some(p) => {
                let probs = p.probs(state)?;
                constrained_state_value(q_values, stage, &self.update_set, Some(&probs))
            }
        }
    }

    /// Greedy on the update set, fixed elsewhere.
    pub fn compose(&self, greedy: Vec<Arc<dyn ActionValues>>) -> PolicyVector {
        let stages = greedy
            .into_iter()
            .enumerate()
            .map(|(k, q)| match self.fixed_policy(k) {
                Some(p) => p.clone(),
                None => StagePolicy::Greedy(q),
            })
            .collect();
        PolicyVector::new(stages)
    }
}

/// Max over actions for stages in the update set, expectation under the fixed
/// policy otherwise.
pub fn constrained_state_value(
    q_values: &[f64],
    stage: usize,
    update_set: &UpdateSet,
    fixed_policy_probs: Option<&[f64]>,
) -> Result<f64> {
    if q_values.is_empty() {
        return Err(Error::EmptyData("no action values".into()));
    }
    if update_set.contains(stage) {
        return Ok(q_values[argmax(q_values)]);
    }
    let probs = fixed_policy_probs.ok_or(Error::MissingFixedPolicy { stage })?;
    crate::error::check_dim("fixed policy probabilities", q_values.len(), probs.len())?;
    check_normalized(probs)?;
    Ok(probs.iter().zip(q_values).map(|(p, q)| p * q).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constrained_value_examples() {
        let all = UpdateSet::all(2);
        let none = UpdateSet::new(2, []).unwrap();
        assert_eq!(
            constrained_state_value(&[1.0, 3.0, 2.0], 0, &all, None).unwrap(),
            3.0
        );
        assert_eq!(
            constrained_state_value(&[1.0, 3.0, 2.0], 0, &none, Some(&[0.5, 0.5, 0.0])).unwrap(),
            2.0
        );
        assert_eq!(constrained_state_value(&[5.0], 1, &all, None).unwrap(), 5.0);
        assert_eq!(
            constrained_state_value(&[5.0], 1, &none, Some(&[1.0])).unwrap(),
            5.0
        );
        assert!(matches!(
            constrained_state_value(&[1.0, 2.0], 0, &none, None),
            Err(Error::MissingFixedPolicy { stage: 0 })
        ));
        assert!(matches!(
            constrained_state_value(&[1.0, 2.0], 0, &none, Some(&[0.7, 0.7])),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0, -0.5, -3.0]), 1);
    }

    #[test]
    fn update_set_rejects_out_of_range() {
        assert!(UpdateSet::new(3, [0, 3]).is_err());
        let u = UpdateSet::new(4, [1, 2]).unwrap();
        assert!(u.contains(1) && !u.contains(0));
    }

    #[test]
    fn constraints_require_fixed_policies() {
        let u = UpdateSet::new(2, [0]).unwrap();
        assert!(matches!(
            PolicyConstraints::new(u.clone(), vec![None, None]),
            Err(Error::MissingFixedPolicy { stage: 1 })
        ));
        let c = PolicyConstraints::uniform_outside(u, &[3, 4]).unwrap();
        assert!(c.fixed_policy(0).is_none());
        assert_eq!(c.fixed_policy(1).unwrap().kind(), PolicyKind::UniformRandom);
    }

    #[test]
    fn fixed_policy_outputs_are_validated() {
        let bad = StagePolicy::Fixed {
            actions: 2,
            probs: Arc::new(|_| vec![0.6, 0.6]),
        };
        assert!(bad.probs(&[0.0]).is_err());
        let wrong_len = StagePolicy::Fixed {
            actions: 3,
            probs: Arc::new(|_| vec![1.0]),
        };
        assert!(wrong_len.probs(&[0.0]).is_err());
    }

    #[test]
    fn sampling_follows_distribution() {
        let p = StagePolicy::constant(vec![0.2, 0.0, 0.8]).unwrap();
        let mut rng = stream(3);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[p.sample(&[], &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        let frac = counts[0] as f64 / 20_000.0;
        assert!((frac - 0.2).abs() < 0.015, "{frac}");
    }

    #[test]
    fn deterministic_policy_is_point_mass() {
        let p = StagePolicy::deterministic(4, |s| if s[0] > 0.0 { 3 } else { 1 });
        assert_eq!(p.probs(&[1.0]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.probs(&[-1.0]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }
}
