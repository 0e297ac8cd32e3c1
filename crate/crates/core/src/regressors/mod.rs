//! Regression backends for Q-function fits.
//!
//! Every fit goes through [`fit`] with a [`RegressorSpec`] and returns a
//! serializable [`FittedModel`].

pub mod basis;
pub mod forest;
pub mod linear;
pub mod tabular;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use basis::{build_basis, BasisKind, BasisSpec};
pub use forest::{Bootstrap, ForestParams, RandomForest};
pub use linear::{fit_linear, LinearModel, Ridge};
pub use tabular::TabularModel;

use crate::error::{check_dim, Error, Result};

/// Version stamped into serialized models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressorSpec {
    LinearSieve {
        basis: BasisKind,
        #[serde(default)]
        ridge: Ridge,
    },
    RandomForest(ForestParams),
    Tabular {
        #[serde(default)]
        default_value: f64,
    },
}

impl RegressorSpec {
    pub fn linear(basis: BasisKind) -> Self {
        RegressorSpec::LinearSieve {
            basis,
            ridge: Ridge::default(),
        }
    }

    pub fn forest(params: ForestParams) -> Self {
        RegressorSpec::RandomForest(params)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RegressorSpec::LinearSieve { ridge, .. } => ridge.validate(),
            RegressorSpec::RandomForest(p) => p.validate(),
            RegressorSpec::Tabular { default_value } if !default_value.is_finite() => Err(
                Error::InvalidArgument("tabular default must be finite".into()),
            ),
            RegressorSpec::Tabular { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelParams {
    LinearSieve(LinearModel),
    RandomForest(RandomForest),
    Tabular(TabularModel),
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub input_dim: usize,
    pub n_samples: usize,
    pub params: ModelParams,
}

impl FittedModel {
    pub fn constant(input_dim: usize, value: f64) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            input_dim,
            n_samples: 0,
            params: ModelParams::Constant { value },
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim("model input", self.input_dim, x.len())?;
        match &self.params {
            ModelParams::LinearSieve(m) => m.predict(x),
            ModelParams::RandomForest(m) => m.predict(x),
            ModelParams::Tabular(m) => m.predict(x),
            ModelParams::Constant { value } => Ok(*value),
        }
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

/// Fits `spec` to `(inputs, targets)`. `rng` is only consumed by stochastic
/// backends.
pub fn fit(
    spec: &RegressorSpec,
    inputs: &[Vec<f64>],
    targets: &[f64],
    rng: &mut dyn RngCore,
) -> Result<FittedModel> {
    spec.validate()?;
    check_dim("targets", inputs.len(), targets.len())?;
    let Some(first) = inputs.first() else {
        return Err(Error::EmptyData(
            "regression needs at least one sample".into(),
        ));
    };
    let input_dim = first.len();
    for (x, y) in inputs.iter().zip(targets) {
        check_dim("regression input", input_dim, x.len())?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "regression data must be finite".into(),
            ));
        }
    }
    let params = match *spec {
        RegressorSpec::LinearSieve { basis, ridge } => {
            let basis = BasisSpec::new(basis, input_dim)?;
            ModelParams::LinearSieve(fit_linear(basis, ridge, inputs, targets)?)
        }
        RegressorSpec::RandomForest(p) => {
            ModelParams::RandomForest(RandomForest::fit(p, inputs, targets, rng)?)
        }
        RegressorSpec::Tabular { default_value } => {
            ModelParams::Tabular(TabularModel::fit(inputs, targets, default_value)?)
        }
    };
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        input_dim,
        n_samples: inputs.len(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn models_round_trip_through_json() {
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64 / 10.0, (i % 3) as f64])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[1] - 1.0).collect();
        let specs = [
            RegressorSpec::linear(BasisKind::QuadraticSymmetric),
            RegressorSpec::forest(ForestParams {
                num_trees: 3,
                ..Default::default()
            }),
            RegressorSpec::Tabular { default_value: 0.0 },
        ];
        for spec in specs {
            let m = fit(&spec, &xs, &ys, &mut stream(1)).unwrap();
            let back = FittedModel::from_json(&serde_json::to_string(&m).unwrap()).unwrap();
            for x in &xs {
                assert_eq!(back.predict(x).unwrap(), m.predict(x).unwrap());
            }
        }
    }

    #[test]
    fn spec_parses_from_json() {
        let s: RegressorSpec =
            serde_json::from_str(r#"{"kind":"random-forest","num_trees":10,"min_leaf":3}"#)
                .unwrap();
        assert_eq!(
            s,
            RegressorSpec::RandomForest(ForestParams {
                num_trees: 10,
                min_leaf: 3,
                ..Default::default()
            })
        );
        let s: RegressorSpec =
            serde_json::from_str(r#"{"kind":"linear-sieve","basis":{"kind":"quadratic"}}"#)
                .unwrap();
        assert_eq!(s, RegressorSpec::linear(BasisKind::Quadratic));
    }

    #[test]
    fn rejects_bad_input() {
        let spec = RegressorSpec::Tabular { default_value: 0.0 };
        assert!(fit(&spec, &[], &[], &mut stream(0)).is_err());
        assert!(fit(&spec, &[vec![1.0]], &[f64::NAN], &mut stream(0)).is_err());
        assert!(fit(
            &spec,
            &[vec![1.0], vec![1.0, 2.0]],
            &[0.0, 0.0],
            &mut stream(0)
        )
        .is_err());
        let m = fit(&spec, &[vec![1.0]], &[2.0], &mut stream(0)).unwrap();
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }
}
