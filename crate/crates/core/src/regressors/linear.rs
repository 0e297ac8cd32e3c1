use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::BasisSpec;
use crate::error::{check_dim, Error, Result};

/// Relative singular-value cutoff below which an unregularized design is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Ridge penalty, either absolute or proportional to the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    Absolute(f64),
    PerSample(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::PerSample(1e-8)
    }
}

impl Ridge {
    pub fn value(&self, n: usize) -> f64 {
        match *self {
            Ridge::Absolute(l) => l,
            Ridge::PerSample(l) => l * n as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = match *self {
            Ridge::Absolute(l) | Ridge::PerSample(l) => l,
        };
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge must be a nonnegative number, got {l}"
            )));
        }
        Ok(())
    }
}

/// Linear model on sieve features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub basis: BasisSpec,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        thread_local! {
            static PHI: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
        }
        PHI.with_borrow_mut(|phi| {
            self.basis.expand_into(x, phi)?;
            Ok(phi.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
        })
    }
}

/// Regularized normal equations `(X^T X + lambda I, X^T y)` on expanded features.
pub fn normal_equations(
    basis: &BasisSpec,
    inputs: &[Vec<f64>],
    targets: &[f64],
    lambda: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dim("targets", inputs.len(), targets.len())?;
    let p = basis.feature_dim();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut phi = Vec::with_capacity(p);
    for (x, &y) in inputs.iter().zip(targets) {
        basis.expand_into(x, &mut phi)?;
        for i in 0..p {
            let fi = phi[i];
            if fi == 0.0 {
                continue;
            }
            rhs[i] += fi * y;
            for j in i..p {
                gram[(i, j)] += fi * phi[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += lambda;
    }
    Ok((gram, rhs))
}

/// Least squares with a ridge penalty, solved through an SVD of the
/// regularized normal matrix.
pub fn fit_linear(
    basis: BasisSpec,
    ridge: Ridge,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<LinearModel> {
    ridge.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyData(
            "linear sieve fit needs at least one sample".into(),
        ));
    }
    let lambda = ridge.value(inputs.len());
    let (gram, rhs) = normal_equations(&basis, inputs, targets, lambda)?;
    let svd = gram.svd(true, true);
    let largest = svd.singular_values.max();
    let smallest = svd.singular_values.min();
    if !(smallest > RANK_TOL * largest) {
        if lambda == 0.0 {
            return Err(Error::RankDeficient { smallest });
        }
        return Err(Error::IllConditioned {
            condition: largest / smallest,
            limit: 1.0 / RANK_TOL,
            smallest,
        });
    }
    let beta = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(LinearModel {
        basis,
        coefficients: beta.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressors::basis::BasisKind;
    use crate::rng::stream;
    use rand::Rng;

    fn design(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    /// Gaussian elimination with partial pivoting; independent of nalgebra.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    #[test]
    fn exact_linear_targets_match_normal_equation_oracle() {
        let basis = BasisSpec::new(BasisKind::QuadraticSymmetric, 2).unwrap();
        let xs = design(50, 2, 11);
        let truth = [0.3, -1.0, 2.0, 0.5, -0.25, 0.75];
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                basis
                    .expand(x)
                    .unwrap()
                    .iter()
                    .zip(&truth)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let model = fit_linear(basis, Ridge::Absolute(0.0), &xs, &ys).unwrap();

        let p = basis.feature_dim();
        let mut ata = vec![vec![0.0; p]; p];
        let mut aty = vec![0.0; p];
        for (x, y) in xs.iter().zip(&ys) {
            let f = basis.expand(x).unwrap();
            for i in 0..p {
                aty[i] += f[i] * y;
                for j in 0..p {
                    ata[i][j] += f[i] * f[j];
                }
            }
        }
        let oracle = gauss_solve(ata, aty);
        for (b, o) in model.coefficients.iter().zip(&oracle) {
            assert!((b - o).abs() <= 1e-8 * (1.0 + o.abs()), "{b} vs {o}");
        }
        for (b, t) in model.coefficients.iter().zip(&truth) {
            assert!((b - t).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicated_columns_need_ridge() {
        let xs = design(30, 2, 5);
        let ys: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let err = fit_linear(BasisSpec::quadratic(2), Ridge::Absolute(0.0), &xs, &ys).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        assert!(err.to_string().contains("positive ridge"));
        fit_linear(BasisSpec::quadratic(2), Ridge::default(), &xs, &ys).unwrap();
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            fit_linear(BasisSpec::quadratic(1), Ridge::default(), &[], &[]),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn stationarity_residual_with_ridge() {
        for seed in 0..10 {
            let basis = BasisSpec::quadratic(2);
            let xs = design(40, 2, seed);
            let mut rng = stream(seed + 100);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let lambda = 0.5;
            let m = fit_linear(basis, Ridge::Absolute(lambda), &xs, &ys).unwrap();
            let (g, r) = normal_equations(&basis, &xs, &ys, lambda).unwrap();
            let beta = DVector::from_vec(m.coefficients.clone());
            let resid = (&g * &beta - &r).amax();
            assert!(resid <= 1e-6 * (1.0 + r.amax()), "{resid}");
        }
    }

    #[test]
    fn ridge_shrinks_coefficients() {
        for seed in 0..20 {
            let basis = BasisSpec::new(BasisKind::QuadraticSymmetric, 2).unwrap();
            let xs = design(25, 2, seed);
            let mut rng = stream(seed + 7);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut last = f64::INFINITY;
            for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
                let m = fit_linear(basis, Ridge::Absolute(lambda), &xs, &ys).unwrap();
                let norm = m.coefficients.iter().map(|b| b * b).sum::<f64>().sqrt();
                assert!(norm <= last * (1.0 + 1e-9), "seed {seed}: {norm} > {last}");
                last = norm;
            }
        }
    }
}
