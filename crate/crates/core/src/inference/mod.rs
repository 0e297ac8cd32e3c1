//! Linear sieve inference for stage values.
//!
//! The Q-functions of a policy are approximated by `Phi_k(s)^T beta_{k,a}`,
//! with all coefficients stacked into one global vector. Solving the
//! empirical Bellman system gives `beta`, projecting onto expected features
//! gives the value vector, and a sandwich formula gives its covariance.

pub mod ensemble;
pub mod stats;

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ensemble::{
    ensemble_evaluate, evaluate_policy_sieve, partition_folds, FoldEstimate, InferenceConfig,
};
pub use stats::{chi2_cdf, chi2_quantile, ks_p_value, ks_statistic};

use crate::error::{check_dim, Error, Result};
use crate::mdp::{check_normalized, CyclicEnv, PolicyVector, StageDataset, StageSpec};
use crate::regressors::{BasisKind, BasisSpec};
use crate::rng;

/// Default condition-number limit for the global system.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

/// Rows per partial sum when assembling; fixes the reduction order.
const ASSEMBLY_CHUNK: usize = 256;

/// Placement of the `(stage, action)` coefficient blocks in the global vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveLayout {
    pub bases: Vec<BasisSpec>,
    pub action_counts: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total_dim: usize,
}

impl SieveLayout {
    pub fn new(bases: Vec<BasisSpec>, action_counts: Vec<usize>) -> Result<Self> {
        check_dim("layout action counts", bases.len(), action_counts.len())?;
        if bases.is_empty() {
            return Err(Error::InvalidArgument(
                "layout needs at least one stage".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(bases.len());
        let mut total = 0;
        for (b, &a) in bases.iter().zip(&action_counts) {
            offsets.push(total);
            total += b.feature_dim() * a;
        }
        Ok(Self {
            bases,
            action_counts,
            offsets,
            total_dim: total,
        })
    }

    /// The same basis family on every stage.
    pub fn for_stages(stages: &[StageSpec], kind: BasisKind) -> Result<Self> {
        let bases = stages
            .iter()
            .map(|s| BasisSpec::new(kind, s.state_dim))
            .collect::<Result<Vec<_>>>()?;
        Self::new(bases, stages.iter().map(|s| s.action_count).collect())
    }

    pub fn num_stages(&self) -> usize {
        self.bases.len()
    }

    /// `L_k`.
    pub fn feature_dim(&self, stage: usize) -> usize {
        self.bases[stage].feature_dim()
    }

    /// `L_k * A_k`.
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.feature_dim(stage) * self.action_counts[stage]
    }

    pub fn stage_range(&self, stage: usize) -> Range<usize> {
        self.offsets[stage]..self.offsets[stage] + self.stage_dim(stage)
    }

    pub fn block(&self, stage: usize, action: usize) -> Range<usize> {
        let l = self.feature_dim(stage);
        let start = self.offsets[stage] + action * l;
        start..start + l
    }
}

/// `Phi(state)` in block `action` of a length `L * actions` vector.
pub fn local_feature_psi(
    state: &[f64],
    action: usize,
    basis: &BasisSpec,
    actions: usize,
) -> Result<Vec<f64>> {
    if action >= actions {
        return Err(Error::ActionOutOfRange {
            stage: usize::MAX,
            action,
            count: actions,
        });
    }
    let phi = basis.expand(state)?;
    let l = phi.len();
    let mut out = vec![0.0; l * actions];
    out[action * l..(action + 1) * l].copy_from_slice(&phi);
    Ok(out)
}

/// Block `a` holds `Phi(state) * probs[a]`.
pub fn policy_weighted_u(state: &[f64], basis: &BasisSpec, probs: &[f64]) -> Result<Vec<f64>> {
    check_normalized(probs)?;
    let phi = basis.expand(state)?;
    let mut out = Vec::with_capacity(phi.len() * probs.len());
    for &p in probs {
        out.extend(phi.iter().map(|f| f * p));
    }
    Ok(out)
}

/// One transition in sparse form: `psi` is `phi` at `psi_offset`, and the
/// continuation vector `(1 - T) U + gamma T U'` is `next` at `next_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub psi_offset: usize,
    pub phi: Vec<f64>,
    pub next_offset: usize,
    pub next: Vec<f64>,
    pub reward: f64,
}

impl SampleRow {
    /// Sample Bellman error `r + next^T beta - psi^T beta`.
    pub fn bellman_error(&self, beta: &DVector<f64>) -> f64 {
        let own: f64 = self
            .phi
            .iter()
            .enumerate()
            .map(|(i, f)| f * beta[self.psi_offset + i])
            .sum();
        let cont: f64 = self
            .next
            .iter()
            .enumerate()
            .map(|(j, u)| u * beta[self.next_offset + j])
            .sum();
        self.reward + cont - own
    }
}

/// `H = (1/n) sum psi (psi - next)^T` and `b = (1/n) sum psi r`.
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n: usize,
    pub rows: Vec<SampleRow>,
}

fn sample_row(
    layout: &SieveLayout,
    env: &dyn CyclicEnv,
    policy: &PolicyVector,
    t: &crate::mdp::Transition,
) -> Result<SampleRow> {
    let k = t.stage;
    let basis = &layout.bases[k];
    let phi = basis.expand(&t.state)?;
    let psi_offset = layout.block(k, t.action).start;
    let (next_offset, next) = if t.terminal {
        let kn = env.next_stage(k);
        let entry = env.stage_transition(k, &t.next_state);
        let probs = policy.probs(kn, &entry)?;
        let mut u = policy_weighted_u(&entry, &layout.bases[kn], &probs)?;
        let g = env.stages()[k].discount;
        u.iter_mut().for_each(|x| *x *= g);
        (layout.offsets[kn], u)
    } else {
        let probs = policy.probs(k, &t.next_state)?;
        (
            layout.offsets[k],
            policy_weighted_u(&t.next_state, basis, &probs)?,
        )
    };
    Ok(SampleRow {
        psi_offset,
        phi,
        next_offset,
        next,
        reward: t.reward,
    })
}

/// Builds the empirical Bellman system for evaluating `policy` on `datasets`.
pub fn assemble_global_system(
    datasets: &[StageDataset],
    policy: &PolicyVector,
    layout: &SieveLayout,
    env: &dyn CyclicEnv,
) -> Result<GlobalSystem> {
    let stages = env.stages();
    check_dim("layout stages", stages.len(), layout.num_stages())?;
    check_dim("policy stages", stages.len(), policy.num_stages())?;
    for (k, s) in stages.iter().enumerate() {
        check_dim(
            "layout state dimension",
            s.state_dim,
            layout.bases[k].input_dim,
        )?;
        check_dim(
            "layout action count",
            s.action_count,
            layout.action_counts[k],
        )?;
    }
    let transitions: Vec<&crate::mdp::Transition> =
        datasets.iter().flat_map(|d| d.transitions.iter()).collect();
    if transitions.is_empty() {
        return Err(Error::EmptyData("no transitions to assemble".into()));
    }
    for t in &transitions {
        t.validate(stages)?;
    }
    let rows = transitions
        .par_iter()
        .map(|t| sample_row(layout, env, policy, t))
        .collect::<Result<Vec<_>>>()?;

    let p = layout.total_dim;
    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = rows
        .par_chunks(ASSEMBLY_CHUNK)
        .map(|chunk| {
            let mut h = DMatrix::<f64>::zeros(p, p);
            let mut b = DVector::<f64>::zeros(p);
            for r in chunk {
                for (i, &fi) in r.phi.iter().enumerate() {
                    if fi == 0.0 {
                        continue;
                    }
                    let row = r.psi_offset + i;
                    b[row] += fi * r.reward;
                    for (j, &fj) in r.phi.iter().enumerate() {
                        h[(row, r.psi_offset + j)] += fi * fj;
                    }
                    for (j, &u) in r.next.iter().enumerate() {
                        h[(row, r.next_offset + j)] -= fi * u;
                    }
                }
            }
            (h, b)
        })
        .collect();
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (ph, pb) in partials {
        h += ph;
        b += pb;
    }
    let n = rows.len();
    h /= n as f64;
    b /= n as f64;
    Ok(GlobalSystem { h, b, n, rows })
}

fn check_condition(h: &DMatrix<f64>, limit: f64) -> Result<()> {
    let sv = h.singular_values();
    let (largest, smallest) = (sv.max(), sv.min());
    let condition = largest / smallest;
    if !(condition <= limit) {
        return Err(Error::IllConditioned {
            condition,
            limit,
            smallest,
        });
    }
    Ok(())
}

/// `beta = H^{-1} b`, refusing systems with condition number above `condition_limit`.
pub fn solve_beta(system: &GlobalSystem, condition_limit: f64) -> Result<DVector<f64>> {
    check_condition(&system.h, condition_limit)?;
    let lu = system.h.clone().full_piv_lu();
    let beta = lu
        .solve(&system.b)
        .ok_or(Error::RankDeficient { smallest: 0.0 })?;
    Ok(beta)
}

/// Monte Carlo estimate of `E_{s ~ eta_k}[U_k(s)]` for every stage, as the
/// columns of an `L_tot x K` matrix.
pub fn expected_features(
    layout: &SieveLayout,
    policy: &PolicyVector,
    env: &dyn CyclicEnv,
    num_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<f64>> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one initial-state draw".into(),
        ));
    }
    let k_total = layout.num_stages();
    let mut eu = DMatrix::<f64>::zeros(layout.total_dim, k_total);
    let base = rng.next_u64();
    let chunks = num_samples.div_ceil(ASSEMBLY_CHUNK);
    for k in 0..k_total {
        // Each chunk draws its states from its own stream, so the sum does
        // not depend on scheduling.
        let sum = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut r = rng::child_stream(base, &[k as u64, c as u64]);
                let len = ASSEMBLY_CHUNK.min(num_samples - c * ASSEMBLY_CHUNK);
                let mut acc = vec![0.0; layout.stage_dim(k)];
                let mut phi = Vec::new();
                for _ in 0..len {
                    let s = env.sample_initial(k, &mut r);
                    let probs = policy.probs(k, &s)?;
                    check_normalized(&probs)?;
                    layout.bases[k].expand_into(&s, &mut phi)?;
                    for (block, &p) in acc.chunks_mut(phi.len()).zip(&probs) {
                        // Adding a zero-weight block would not change the sum.
                        if p != 0.0 {
                            block.iter_mut().zip(&phi).for_each(|(a, f)| *a += p * f);
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(vec![0.0; layout.stage_dim(k)], |mut a, c| {
                a.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
                a
            });
        for (i, v) in sum.iter().enumerate() {
            eu[(layout.offsets[k] + i, k)] = v / num_samples as f64;
        }
    }
    Ok(eu)
}

/// `v_k = E[U_k]^T beta`.
pub fn estimate_value(beta: &DVector<f64>, expected_u: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim("beta length", expected_u.nrows(), beta.len())?;
    Ok(expected_u.transpose() * beta)
}

/// Residual-weighted feature covariance `(1/n) sum e^2 psi psi^T`.
pub fn omega_hat(system: &GlobalSystem, beta: &DVector<f64>) -> DMatrix<f64> {
    let p = system.h.nrows();
    let mut omega = DMatrix::<f64>::zeros(p, p);
    for r in &system.rows {
        let e2 = r.bellman_error(beta).powi(2);
        for (i, &fi) in r.phi.iter().enumerate() {
            for (j, &fj) in r.phi.iter().enumerate() {
                omega[(r.psi_offset + i, r.psi_offset + j)] += e2 * fi * fj;
            }
        }
    }
    omega / system.n as f64
}

/// Sandwich covariance `E[U]^T H^{-1} Omega H^{-T} E[U]`, symmetrized.
pub fn estimate_covariance(
    system: &GlobalSystem,
    beta: &DVector<f64>,
    expected_u: &DMatrix<f64>,
    condition_limit: f64,
) -> Result<DMatrix<f64>> {
    check_condition(&system.h, condition_limit)?;
    check_dim("beta length", system.h.nrows(), beta.len())?;
    let h_inv = system
        .h
        .clone()
        .full_piv_lu()
        .try_inverse()
        .ok_or(Error::RankDeficient { smallest: 0.0 })?;
    let omega = omega_hat(system, beta);
    let g = h_inv.transpose() * expected_u;
    let sigma = g.transpose() * omega * g;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Symmetric square root; negative eigenvalues from rounding are set to 0.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |x| x.max(0.0).sqrt())
}

/// Symmetric inverse square root with eigenvalues floored at `1e-12 * trace`.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let floor = 1e-12 * m.trace().abs();
    spectral_map(m, |x| 1.0 / x.max(floor).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub v_hat: Vec<f64>,
    /// Row-major `K x K`.
    pub sigma_hat: Vec<Vec<f64>>,
    /// Total sample size across all folds.
    pub n: usize,
    pub folds: usize,
}

impl InferenceResult {
    pub fn from_parts(v: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, folds: usize) -> Self {
        Self {
            v_hat: v.iter().copied().collect(),
            sigma_hat: (0..sigma.nrows())
                .map(|i| sigma.row(i).iter().copied().collect())
                .collect(),
            n,
            folds,
        }
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let k = self.v_hat.len();
        DMatrix::from_fn(k, k, |i, j| self.sigma_hat[i][j])
    }

    /// `n (N - 1) / N`.
    pub fn effective_n(&self) -> f64 {
        self.n as f64 * (self.folds as f64 - 1.0) / self.folds as f64
    }

    /// Flat text record for reports.
    pub fn to_record(&self, level: f64, v_star: Option<&[f64]>) -> Result<InferenceRecord> {
        let threshold = chi2_quantile(self.v_hat.len(), level)?;
        let d2 = v_star.map(|v| mahalanobis_d2(self, v)).transpose()?;
        Ok(InferenceRecord {
            v_hat: self.v_hat.clone(),
            sigma_hat: self.sigma_hat.iter().flatten().copied().collect(),
            n: self.n,
            folds: self.folds,
            level,
            threshold,
            d2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub v_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub n: usize,
    pub folds: usize,
    pub level: f64,
    pub threshold: f64,
    pub d2: Option<f64>,
}

/// `n (N-1)/N (v_hat - v)^T Sigma^{-1} (v_hat - v)`.
pub fn mahalanobis_d2(result: &InferenceResult, v_star: &[f64]) -> Result<f64> {
    check_dim("candidate value", result.v_hat.len(), v_star.len())?;
    let sigma = result.sigma_matrix();
    let chol = nalgebra::Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let diff = DVector::from_iterator(
        v_star.len(),
        result.v_hat.iter().zip(v_star).map(|(a, b)| a - b),
    );
    let d2 = result.effective_n() * diff.dot(&chol.solve(&diff));
    Ok(d2.max(0.0))
}

/// Whether `candidate` lies in the closed confidence region at `level`.
pub fn confidence_region_contains(
    result: &InferenceResult,
    candidate: &[f64],
    level: f64,
) -> Result<bool> {
    let threshold = chi2_quantile(result.v_hat.len(), level)?;
    Ok(mahalanobis_d2(result, candidate)? <= threshold)
}
