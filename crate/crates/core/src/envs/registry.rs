//! Environments by name, with their serializable parameterization.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::glucose::{GlucoseConfig, GlucoseEnv};
use super::linear::{LinearEnv, LinearEnvConfig};
use super::sampling::SamplingConfig;
use crate::error::{Error, Result};
use crate::mdp::{CyclicEnv, StageSpec};

pub const ENV_NAMES: [&str; 3] = ["linear", "glucose", "zero"];

/// Cycles per glucose trajectory when sampling offline data.
pub const GLUCOSE_SAMPLING_CYCLES: usize = 10;

/// Any environment with every reward replaced by zero.
#[derive(Debug, Clone)]
pub struct ZeroRewardEnv<E>(pub E);

impl<E: CyclicEnv> CyclicEnv for ZeroRewardEnv<E> {
    fn stages(&self) -> &[StageSpec] {
        self.0.stages()
    }

    fn is_terminal(&self, stage: usize, state: &[f64], action: usize) -> bool {
        self.0.is_terminal(stage, state, action)
    }

    fn stage_transition(&self, stage: usize, exit_state: &[f64]) -> Vec<f64> {
        self.0.stage_transition(stage, exit_state)
    }

    fn step(
        &self,
        stage: usize,
        state: &[f64],
        action: usize,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        (0.0, self.0.step(stage, state, action, rng).1)
    }

    fn sample_initial(&self, stage: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.0.sample_initial(stage, rng)
    }
}

/// Serializable choice of environment. `zero` is the glucose simulator with
/// all rewards set to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvConfig {
    Linear {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        config: LinearEnvConfig,
    },
    Glucose {
        #[serde(default)]
        config: GlucoseConfig,
    },
    Zero {
        #[serde(default)]
        config: GlucoseConfig,
    },
}

impl EnvConfig {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(EnvConfig::Linear {
                seed: 0,
                config: LinearEnvConfig::default(),
            }),
            "glucose" => Ok(EnvConfig::Glucose {
                config: GlucoseConfig::default(),
            }),
            "zero" => Ok(EnvConfig::Zero {
                config: GlucoseConfig::default(),
            }),
            other => Err(Error::UnknownName(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Linear { .. } => "linear",
            EnvConfig::Glucose { .. } => "glucose",
            EnvConfig::Zero { .. } => "zero",
        }
    }

    pub fn build(&self) -> Result<Arc<dyn CyclicEnv>> {
        Ok(match self {
            EnvConfig::Linear { seed, config } => Arc::new(LinearEnv::new(config.clone(), *seed)?),
            EnvConfig::Glucose { config } => Arc::new(GlucoseEnv::new(config.clone())?),
            EnvConfig::Zero { config } => Arc::new(ZeroRewardEnv(GlucoseEnv::new(config.clone())?)),
        })
    }

    /// How offline data for this environment is collected by default.
    pub fn default_sampling(&self) -> SamplingConfig {
        match self {
            EnvConfig::Linear { .. } => SamplingConfig::Independent,
            _ => SamplingConfig::Trajectories {
                cycles: GLUCOSE_SAMPLING_CYCLES,
                warmup_cycles: 0,
            },
        }
    }

    /// Pretty JSON of the full parameterization, including drawn coefficients.
    pub fn describe(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let EnvConfig::Linear { seed, config } = self {
            let env = LinearEnv::new(config.clone(), *seed)?;
            value["coefficients"] = serde_json::to_value(&env.stages)?;
        }
        let specs = self.build()?.stages().to_vec();
        value["stages"] = serde_json::to_value(specs)?;
        value["sampling"] = serde_json::to_value(self.default_sampling())?;
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{monte_carlo_value, PolicyVector};
    use crate::rng::stream;

    #[test]
    fn names_resolve() {
        for name in ENV_NAMES {
            let cfg = EnvConfig::from_name(name).unwrap();
            assert_eq!(cfg.name(), name);
            cfg.build().unwrap();
            let text = cfg.describe().unwrap();
            assert!(text.contains("\"stages\""));
        }
        assert!(matches!(
            EnvConfig::from_name("nope"),
            Err(Error::UnknownName(_))
        ));
    }

    #[test]
    fn config_round_trips() {
        let cfg = EnvConfig::from_name("glucose").unwrap();
        let back: EnvConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: EnvConfig = serde_json::from_str(r#"{"name":"linear","seed":4}"#).unwrap();
        assert_eq!(
            partial,
            EnvConfig::Linear {
                seed: 4,
                config: LinearEnvConfig::default()
            }
        );
    }

    #[test]
    fn zero_env_has_zero_value() {
        let env = EnvConfig::from_name("zero").unwrap().build().unwrap();
        let policy = PolicyVector::uniform(&env.action_counts());
        let v = monte_carlo_value(env.as_ref(), &policy, 0, 20, 2, &mut stream(0)).unwrap();
        assert_eq!(v, 0.0);
    }
}
