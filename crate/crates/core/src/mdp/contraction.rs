//! Empirical checks of the constrained Bellman operator on random finite MDPs:
//! non-expansiveness, contraction over one total horizon, the fixed point,
//! and the reset case with a zero exit discount.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::tabular::{sup_distance, FiniteCyclicMdp, LayeredStage, OperatorOptions, QTables};
use super::{cycle_discount, CyclicEnv, PolicyConstraints, StagePolicy, UpdateSet};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractionConfig {
    pub pairs: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Negative control: drop every exit discount from the operator.
    pub ignore_discount: bool,
    pub widths: Vec<usize>,
    pub horizons: Vec<usize>,
    pub actions: Vec<usize>,
    pub discounts: Vec<f64>,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            seed: 0,
            tolerance: 1e-10,
            ignore_discount: false,
            widths: vec![3, 2, 3],
            horizons: vec![2, 3, 2],
            actions: vec![2, 3, 2],
            discounts: vec![0.9, 0.8, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest `lhs - bound` seen; nonpositive when the check holds.
    pub worst_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub config: ContractionConfig,
    pub cycle_discount: f64,
    pub total_horizon: usize,
    pub checks: Vec<CheckResult>,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn random_tables(shape: &QTables, scale: f64, rng: &mut dyn RngCore) -> QTables {
    shape
        .iter()
        .map(|t| {
            t.iter()
                .map(|row| {
                    row.iter()
                        .map(|_| rng.random_range(-scale..=scale))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn shifted(q: &QTables, c: f64) -> QTables {
    q.iter()
        .map(|t| {
            t.iter()
                .map(|row| row.iter().map(|x| x + c).collect())
                .collect()
        })
        .collect()
}

fn iterate(
    mdp: &FiniteCyclicMdp,
    q: &QTables,
    cons: &PolicyConstraints,
    times: usize,
    opts: OperatorOptions,
) -> Result<QTables> {
    let mut out = q.clone();
    for _ in 0..times {
        out = mdp.apply_bellman_operator_with(&out, cons, opts)?;
    }
    Ok(out)
}

struct Tally {
    name: &'static str,
    cases: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            worst: f64::NEG_INFINITY,
        }
    }

    fn record(&mut self, lhs: f64, bound: f64) {
        self.cases += 1;
        self.worst = self.worst.max(lhs - bound);
    }

    fn finish(self, tol: f64) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            passed: self.cases > 0 && self.worst <= tol,
            cases: self.cases,
            worst_excess: self.worst,
        }
    }
}

fn layered(config: &ContractionConfig, discounts: &[f64]) -> Vec<LayeredStage> {
    (0..config.widths.len())
        .map(|k| LayeredStage {
            width: config.widths[k],
            horizon: config.horizons[k],
            actions: config.actions[k],
            discount: discounts[k],
            early_exit: 0.3,
            reward_range: (-1.0, 1.0),
        })
        .collect()
}

fn constraint_sets(mdp: &FiniteCyclicMdp) -> Result<Vec<PolicyConstraints>> {
    let k = mdp.finite_stages().len();
    let counts: Vec<usize> = mdp
        .finite_stages()
        .iter()
        .map(|s| s.num_actions())
        .collect();
    let mut out = vec![PolicyConstraints::all_stages(k)];
    // Only the first stage optimized; the rest follow a skewed fixed policy.
    let fixed = (0..k)
        .map(|j| {
            if j == 0 {
                Ok(None)
            } else {
                let mut p: Vec<f64> = (1..=counts[j]).map(|i| i as f64).collect();
                let total: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= total);
                StagePolicy::constant(p).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    out.push(PolicyConstraints::new(UpdateSet::new(k, [0])?, fixed)?);
    Ok(out)
}

/// Runs the battery and reports one line per property.
pub fn run_contraction_suite(config: &ContractionConfig) -> Result<ContractionReport> {
    let k = config.widths.len();
    if k == 0
        || config.horizons.len() != k
        || config.actions.len() != k
        || config.discounts.len() != k
    {
        return Err(Error::InvalidArgument(
            "widths, horizons, actions and discounts need one entry per stage".into(),
        ));
    }
    if config.pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut r = rng::stream(config.seed);
    let mdp = FiniteCyclicMdp::random_layered(&layered(config, &config.discounts), false, &mut r)?;
    let gamma = cycle_discount(mdp.stages())?;
    let h = mdp.total_horizon();
    let opts = OperatorOptions {
        ignore_discount: config.ignore_discount,
    };
    let tol = config.tolerance;
    let zero = mdp.zero_tables();
    let sets = constraint_sets(&mdp)?;

    let mut non_expansive = Tally::new("non-expansive");
    let mut contraction = Tally::new("h-step-contraction");
    for i in 0..config.pairs {
        let cons = &sets[i % sets.len()];
        let f = random_tables(&zero, 10.0, &mut r);
        // Every fourth pair is a constant shift, where the bound is tight.
        let g = if i % 4 == 3 {
            shifted(&f, r.random_range(-5.0..=5.0))
        } else {
            random_tables(&zero, 10.0, &mut r)
        };
        let d = sup_distance(&f, &g);
        let (tf, tg) = (
            mdp.apply_bellman_operator_with(&f, cons, opts)?,
            mdp.apply_bellman_operator_with(&g, cons, opts)?,
        );
        non_expansive.record(sup_distance(&tf, &tg), d);
        let (hf, hg) = (
            iterate(&mdp, &f, cons, h, opts)?,
            iterate(&mdp, &g, cons, h, opts)?,
        );
        contraction.record(sup_distance(&hf, &hg), gamma * d);
    }

    let mut fixed_point = Tally::new("fixed-point");
    for cons in &sets {
        let mut q = zero.clone();
        for _ in 0..20_000 {
            let next = mdp.apply_bellman_operator_with(&q, cons, opts)?;
            let done = sup_distance(&next, &q) <= tol * 1e-2;
            q = next;
            if done {
                break;
            }
        }
        let tq = mdp.apply_bellman_operator_with(&q, cons, opts)?;
        fixed_point.record(sup_distance(&tq, &q), 0.0);
    }

    // Same layout with the last exit discount set to zero: after one total
    // horizon the output no longer depends on the input.
    let mut reset_discounts = config.discounts.clone();
    if let Some(last) = reset_discounts.last_mut() {
        *last = 0.0;
    }
    let mut r2 = rng::stream(config.seed);
    let reset_mdp =
        FiniteCyclicMdp::random_layered(&layered(config, &reset_discounts), false, &mut r2)?;
    let mut reset = Tally::new("zero-cycle-discount-reset");
    for cons in &constraint_sets(&reset_mdp)? {
        for _ in 0..config.pairs.div_ceil(10).max(1) {
            let f = random_tables(&zero, 10.0, &mut r);
            let g = random_tables(&zero, 10.0, &mut r);
            let (hf, hg) = (
                iterate(&reset_mdp, &f, cons, h, opts)?,
                iterate(&reset_mdp, &g, cons, h, opts)?,
            );
            reset.record(sup_distance(&hf, &hg), 0.0);
        }
    }

    Ok(ContractionReport {
        config: config.clone(),
        cycle_discount: gamma,
        total_horizon: h,
        checks: vec![
            non_expansive.finish(tol),
            contraction.finish(tol),
            fixed_point.finish(1e-9),
            reset.finish(tol),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ContractionConfig {
        ContractionConfig {
            pairs: 20,
            ..Default::default()
        }
    }

    #[test]
    fn default_battery_passes() {
        let report = run_contraction_suite(&small()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!((report.cycle_discount - 0.9 * 0.8 * 0.95).abs() < 1e-15);
        assert_eq!(report.total_horizon, 7);
    }

    #[test]
    fn dropping_discounts_breaks_contraction() {
        let cfg = ContractionConfig {
            ignore_discount: true,
            ..small()
        };
        let report = run_contraction_suite(&cfg).unwrap();
        assert!(!report.check("h-step-contraction").unwrap().passed);
        assert!(report.check("non-expansive").unwrap().passed);
    }

    #[test]
    fn rejects_ragged_config() {
        let cfg = ContractionConfig {
            horizons: vec![1],
            ..small()
        };
        assert!(run_contraction_suite(&cfg).is_err());
    }
}
