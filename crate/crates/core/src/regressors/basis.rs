use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Family of sieve basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// `[1, s, vec(s s^T)]` with the full row-major `d^2` block.
    Quadratic,
    /// `[1, s, s_i s_j for i <= j]`: the span of `Quadratic` without the
    /// duplicated cross products.
    QuadraticSymmetric,
    /// All monomials of total degree at most `degree`, in graded order.
    Polynomial { degree: usize },
    /// One-hot indicator of the integer state `s_0` in `0..cells`.
    TabularIndicator { cells: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub input_dim: usize,
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl BasisSpec {
    pub fn new(kind: BasisKind, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument(
                "basis input dimension must be positive".into(),
            ));
        }
        if let BasisKind::TabularIndicator { cells } = kind {
            if input_dim != 1 || cells == 0 {
                return Err(Error::InvalidArgument(
                    "tabular indicator bases need a one-dimensional state and at least one cell"
                        .into(),
                ));
            }
        }
        Ok(Self { kind, input_dim })
    }

    pub fn quadratic(input_dim: usize) -> Self {
        Self {
            kind: BasisKind::Quadratic,
            input_dim,
        }
    }

    /// Length of the feature vector.
    pub fn feature_dim(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            BasisKind::Quadratic => 1 + d + d * d,
            BasisKind::QuadraticSymmetric => 1 + d + d * (d + 1) / 2,
            BasisKind::Polynomial { degree } => binomial(d + degree, degree),
            BasisKind::TabularIndicator { cells } => cells,
        }
    }

    pub fn expand(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.feature_dim());
        self.expand_into(state, &mut out)?;
        Ok(out)
    }

    /// Writes the features of `state` into `out`, replacing its contents.
    pub fn expand_into(&self, state: &[f64], out: &mut Vec<f64>) -> Result<()> {
        check_dim("basis input", self.input_dim, state.len())?;
        out.clear();
        match self.kind {
            BasisKind::Quadratic => {
                out.push(1.0);
                out.extend_from_slice(state);
                for &a in state {
                    out.extend(state.iter().map(|&b| a * b));
                }
            }
            BasisKind::QuadraticSymmetric => {
                out.push(1.0);
                out.extend_from_slice(state);
                for i in 0..state.len() {
                    out.extend(state[i..].iter().map(|&b| state[i] * b));
                }
            }
            BasisKind::Polynomial { degree } => {
                // Monomials of degree g are the degree-(g-1) monomials times s_j,
                // restricted to j >= the last factor so each appears once.
                out.push(1.0);
                let mut prev: Vec<(f64, usize)> = vec![(1.0, 0)];
                for _ in 0..degree {
                    let mut cur = Vec::new();
                    for &(value, last) in &prev {
                        for (j, &x) in state.iter().enumerate().skip(last) {
                            cur.push((value * x, j));
                        }
                    }
                    out.extend(cur.iter().map(|(v, _)| *v));
                    prev = cur;
                }
            }
            BasisKind::TabularIndicator { cells } => {
                let x = state[0];
                if !(x >= 0.0) || x.fract() != 0.0 || x as usize >= cells {
                    return Err(Error::InvalidArgument(format!(
                        "{x} is not a cell index below {cells}"
                    )));
                }
                out.resize(cells, 0.0);
                out[x as usize] = 1.0;
            }
        }
        Ok(())
    }
}

/// Feature vector of `state` under `spec`.
pub fn build_basis(state: &[f64], spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.expand(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic_examples() {
        assert_eq!(
            build_basis(&[2.0], &BasisSpec::quadratic(1)).unwrap(),
            vec![1.0, 2.0, 4.0]
        );
        assert_eq!(
            build_basis(&[1.0, 2.0], &BasisSpec::quadratic(2)).unwrap(),
            vec![1.0, 1.0, 2.0, 1.0, 2.0, 2.0, 4.0]
        );
        let z = build_basis(&[0.0; 3], &BasisSpec::quadratic(3)).unwrap();
        assert_eq!(z.len(), 13);
        assert_eq!(z[0], 1.0);
        assert!(z[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_quadratic_drops_duplicates() {
        let spec = BasisSpec::new(BasisKind::QuadraticSymmetric, 2).unwrap();
        assert_eq!(
            spec.expand(&[1.0, 2.0]).unwrap(),
            vec![1.0, 1.0, 2.0, 1.0, 2.0, 4.0]
        );
    }

    #[test]
    fn polynomial_degree_two_matches_symmetric_quadratic() {
        let a = BasisSpec::new(BasisKind::Polynomial { degree: 2 }, 3).unwrap();
        let b = BasisSpec::new(BasisKind::QuadraticSymmetric, 3).unwrap();
        let s = [0.5, -1.5, 2.0];
        assert_eq!(a.expand(&s).unwrap(), b.expand(&s).unwrap());
        let c = BasisSpec::new(BasisKind::Polynomial { degree: 3 }, 2).unwrap();
        assert_eq!(
            c.expand(&[2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0, 8.0, 12.0, 18.0, 27.0]
        );
    }

    #[test]
    fn indicator_basis() {
        let spec = BasisSpec::new(BasisKind::TabularIndicator { cells: 4 }, 1).unwrap();
        assert_eq!(spec.expand(&[2.0]).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(spec.expand(&[4.0]).is_err());
        assert!(spec.expand(&[1.5]).is_err());
        assert!(BasisSpec::new(BasisKind::TabularIndicator { cells: 4 }, 2).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(build_basis(&[1.0, 2.0], &BasisSpec::quadratic(1)).is_err());
    }

    proptest! {
        #[test]
        fn feature_dim_is_declared_length(
            d in 1usize..=8,
            kind in 0usize..3,
            degree in 0usize..4,
            seed in any::<u64>(),
        ) {
            let kind = match kind {
                0 => BasisKind::Quadratic,
                1 => BasisKind::QuadraticSymmetric,
                _ => BasisKind::Polynomial { degree },
            };
            let spec = BasisSpec::new(kind, d).unwrap();
            let state: Vec<f64> = (0..d).map(|i| ((seed >> (i * 7)) % 97) as f64 / 13.0 - 3.0).collect();
            prop_assert_eq!(spec.expand(&state).unwrap().len(), spec.feature_dim());
        }
    }
}
