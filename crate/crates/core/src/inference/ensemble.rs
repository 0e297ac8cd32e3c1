//! Sample-splitting ensemble: learn a policy on the first folds, evaluate it
//! on the next one, and combine the fold estimates by precision weighting.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    assemble_global_system, estimate_covariance, estimate_value, expected_features, solve_beta,
    sym_inv_sqrt, InferenceResult, SieveLayout, DEFAULT_CONDITION_LIMIT,
};
use crate::error::{Error, Result};
use crate::fqi::{train_cyclefqi, TrainConfig};
use crate::mdp::{CyclicEnv, PolicyConstraints, PolicyVector, StageDataset};
use crate::regressors::BasisKind;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub basis: BasisKind,
    pub folds: usize,
    pub num_eta_samples: usize,
    pub condition_limit: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::QuadraticSymmetric,
            folds: 2,
            num_eta_samples: 10_000,
            condition_limit: DEFAULT_CONDITION_LIMIT,
        }
    }
}

/// Value and covariance estimated on one evaluation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEstimate {
    pub v_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub n: usize,
}

/// Sieve estimate of the value vector of a fixed `policy` on `datasets`.
pub fn evaluate_policy_sieve(
    datasets: &[StageDataset],
    policy: &PolicyVector,
    layout: &SieveLayout,
    env: &dyn CyclicEnv,
    num_eta_samples: usize,
    condition_limit: f64,
    rng: &mut dyn RngCore,
) -> Result<FoldEstimate> {
    let system = assemble_global_system(datasets, policy, layout, env)?;
    let beta = solve_beta(&system, condition_limit)?;
    let eu = expected_features(layout, policy, env, num_eta_samples, rng)?;
    let v_hat = estimate_value(&beta, &eu)?;
    let sigma_hat = estimate_covariance(&system, &beta, &eu, condition_limit)?;
    Ok(FoldEstimate {
        v_hat,
        sigma_hat,
        n: system.n,
    })
}

/// Splits each stage into `folds` parts: seeded shuffle, then round-robin.
/// Transitions keep their original order inside a fold.
pub fn partition_folds(
    datasets: &[StageDataset],
    folds: usize,
    seed: u64,
) -> Result<Vec<Vec<StageDataset>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    let mut out: Vec<Vec<StageDataset>> = (0..folds)
        .map(|_| {
            datasets
                .iter()
                .map(|d| StageDataset::new(d.stage))
                .collect()
        })
        .collect();
    for (k, ds) in datasets.iter().enumerate() {
        if ds.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "stage {k} has {} transitions, fewer than the {folds} folds",
                ds.len()
            )));
        }
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng::child_stream(seed, &[k as u64]));
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); folds];
        for (pos, &i) in idx.iter().enumerate() {
            assigned[pos % folds].push(i);
        }
        for (f, mut rows) in assigned.into_iter().enumerate() {
            rows.sort_unstable();
            out[f][k].transitions = rows
                .into_iter()
                .map(|i| ds.transitions[i].clone())
                .collect();
        }
    }
    Ok(out)
}

fn union(parts: &[Vec<StageDataset>]) -> Vec<StageDataset> {
    let mut out: Vec<StageDataset> = parts[0]
        .iter()
        .map(|d| StageDataset::new(d.stage))
        .collect();
    for p in parts {
        for (o, d) in out.iter_mut().zip(p) {
            o.transitions.extend(d.transitions.iter().cloned());
        }
    }
    out
}

/// Precision-weighted combination of fold estimates.
pub fn aggregate(estimates: &[FoldEstimate]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let Some(first) = estimates.first() else {
        return Err(Error::EmptyData("no fold estimates".into()));
    };
    let k = first.v_hat.len();
    let mut mean_inv_root = DMatrix::<f64>::zeros(k, k);
    let mut weighted = DVector::<f64>::zeros(k);
    for (f, e) in estimates.iter().enumerate() {
        let tr = e.sigma_hat.trace();
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::Fold {
                fold: f + 1,
                message: format!("covariance is not invertible (trace {tr:e})"),
            });
        }
        let r = sym_inv_sqrt(&e.sigma_hat);
        weighted += &r * &e.v_hat;
        mean_inv_root += r;
    }
    let m = estimates.len() as f64;
    mean_inv_root /= m;
    let root = mean_inv_root
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("averaged inverse root is singular".into()))?;
    let root = (&root + root.transpose()) * 0.5;
    let v = &root * weighted / m;
    let sigma = &root * &root;
    Ok((v, (&sigma + sigma.transpose()) * 0.5))
}

/// Learns a policy on growing unions of folds and evaluates each on the
/// following fold; returns the precision-weighted combination.
pub fn ensemble_evaluate(
    datasets: &[StageDataset],
    env: &dyn CyclicEnv,
    constraints: &PolicyConstraints,
    train: &TrainConfig,
    config: &InferenceConfig,
    rng: &mut dyn RngCore,
) -> Result<InferenceResult> {
    let layout = SieveLayout::for_stages(env.stages(), config.basis)?;
    let base = rng.next_u64();
    let parts = partition_folds(datasets, config.folds, rng::derive_seed(base, &[0]))?;
    for (f, p) in parts.iter().enumerate().skip(1) {
        let n: usize = p.iter().map(StageDataset::len).sum();
        if n < layout.total_dim {
            return Err(Error::Fold {
                fold: f + 1,
                message: format!(
                    "fold has {n} samples but the sieve has {} coefficients; use more data or a smaller basis",
                    layout.total_dim
                ),
            });
        }
    }
    let estimates = (1..config.folds)
        .into_par_iter()
        .map(|f| {
            let fold_err = |e: Error| Error::Fold {
                fold: f + 1,
                message: e.to_string(),
            };
            let train_data = union(&parts[..f]);
            let cfg = TrainConfig {
                seed: rng::derive_seed(train.seed, &[f as u64]),
                ..train.clone()
            };
            let (_, policy) =
                train_cyclefqi(&train_data, env, constraints.clone(), &cfg).map_err(fold_err)?;
            let mut r = rng::child_stream(base, &[1, f as u64]);
            evaluate_policy_sieve(
                &parts[f],
                &policy,
                &layout,
                env,
                config.num_eta_samples,
                config.condition_limit,
                &mut r,
            )
            .map_err(fold_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let (v, sigma) = aggregate(&estimates)?;
    let n = datasets.iter().map(StageDataset::len).sum();
    Ok(InferenceResult::from_parts(&v, &sigma, n, config.folds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(v: &[f64], s: &[f64]) -> FoldEstimate {
        let k = v.len();
        FoldEstimate {
            v_hat: DVector::from_vec(v.to_vec()),
            sigma_hat: DMatrix::from_row_slice(k, k, s),
            n: 10,
        }
    }

    #[test]
    fn single_fold_aggregation_is_identity() {
        let e = est(&[1.0, -2.0], &[2.0, 0.3, 0.3, 1.0]);
        let (v, s) = aggregate(std::slice::from_ref(&e)).unwrap();
        assert!((v - &e.v_hat).amax() < 1e-12);
        assert!((s - &e.sigma_hat).amax() < 1e-12);
    }

    #[test]
    fn identical_folds_aggregate_to_themselves() {
        let e = est(
            &[0.5, 1.5, 3.0],
            &[1.0, 0.1, 0.0, 0.1, 2.0, 0.2, 0.0, 0.2, 0.5],
        );
        let (v, s) = aggregate(&[e.clone(), e.clone(), e.clone()]).unwrap();
        assert!((v - &e.v_hat).amax() < 1e-12);
        assert!((s - &e.sigma_hat).amax() < 1e-12);
    }

    #[test]
    fn zero_covariance_names_the_fold() {
        let good = est(&[1.0], &[1.0]);
        let bad = est(&[1.0], &[0.0]);
        let err = aggregate(&[good, bad]).unwrap_err();
        assert!(matches!(err, Error::Fold { fold: 2, .. }));
    }

    #[test]
    fn folds_are_balanced() {
        use crate::mdp::Transition;
        let ds: Vec<StageDataset> = (0..2)
            .map(|k| StageDataset {
                stage: k,
                transitions: (0..11)
                    .map(|i| Transition {
                        stage: k,
                        state: vec![i as f64],
                        action: 0,
                        reward: 0.0,
                        next_state: vec![0.0],
                        terminal: true,
                    })
                    .collect(),
            })
            .collect();
        let parts = partition_folds(&ds, 3, 9).unwrap();
        for k in 0..2 {
            let sizes: Vec<usize> = parts.iter().map(|p| p[k].len()).collect();
            assert!(sizes.iter().all(|&s| s == 3 || s == 4));
            assert_eq!(sizes.iter().sum::<usize>(), 11);
        }
        assert_eq!(parts, partition_folds(&ds, 3, 9).unwrap());
        assert!(partition_folds(&ds, 1, 0).is_err());
    }
}
