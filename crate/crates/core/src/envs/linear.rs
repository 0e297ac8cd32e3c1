//! Three-stage linear-Gaussian cyclic environment.
//!
//! Every decision exits its stage: `s_{k+1} = A_k s + B_k a + xi`,
//! `r = w_k^T s + u_{k,a}`.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{CyclicEnv, StageSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearEnvConfig {
    pub dims: Vec<usize>,
    pub discounts: Vec<f64>,
    pub noise_sd: f64,
    pub state_bound: f64,
    pub num_actions: usize,
}

impl Default for LinearEnvConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 2, 2],
            discounts: vec![0.9; 3],
            noise_sd: 0.1,
            state_bound: 2.0,
            num_actions: 2,
        }
    }
}

/// Coefficients of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStage {
    /// `d_{k+1} x d_k`, row-major.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    /// Per-action reward offsets.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEnv {
    pub config: LinearEnvConfig,
    pub seed: u64,
    pub stages: Vec<LinearStage>,
    #[serde(skip)]
    specs: Vec<StageSpec>,
}

pub fn make_linear_env(seed: u64) -> Result<LinearEnv> {
    LinearEnv::new(LinearEnvConfig::default(), seed)
}

impl LinearEnv {
    pub fn new(config: LinearEnvConfig, seed: u64) -> Result<Self> {
        let k = config.dims.len();
        if k == 0 || config.discounts.len() != k {
            return Err(Error::InvalidArgument(
                "linear env needs one discount per stage".into(),
            ));
        }
        if config.dims.contains(&0) || config.num_actions == 0 {
            return Err(Error::InvalidArgument(
                "dimensions and action count must be positive".into(),
            ));
        }
        if !(config.noise_sd >= 0.0) || !(config.state_bound > 0.0) {
            return Err(Error::InvalidArgument(
                "noise_sd must be >= 0 and state_bound > 0".into(),
            ));
        }
        let mut r = rng::stream(seed);
        let reward_offset = Normal::new(0.0, 0.5).expect("valid normal");
        let stages = (0..k)
            .map(|s| {
                let (d, dn) = (config.dims[s], config.dims[(s + 1) % k]);
                let a = (0..dn)
                    .map(|_| (0..d).map(|_| r.random_range(-0.3..=0.3)).collect())
                    .collect();
                let b = (0..dn).map(|_| r.random_range(-0.3..=0.3)).collect();
                let w = (0..d).map(|_| r.random_range(-0.5..=0.5)).collect();
                let u = (0..config.num_actions)
                    .map(|_| reward_offset.sample(&mut r))
                    .collect();
                LinearStage { a, b, w, u }
            })
            .collect();
        Self::from_coefficients(config, seed, stages)
    }

    /// Builds an environment from explicit coefficients.
    pub fn from_coefficients(
        config: LinearEnvConfig,
        seed: u64,
        stages: Vec<LinearStage>,
    ) -> Result<Self> {
        let k = config.dims.len();
        if stages.len() != k {
            return Err(Error::InvalidArgument(
                "one coefficient set per stage required".into(),
            ));
        }
        let mut specs = Vec::with_capacity(k);
        for (s, st) in stages.iter().enumerate() {
            let (d, dn) = (config.dims[s], config.dims[(s + 1) % k]);
            let shapes_ok = st.a.len() == dn
                && st.a.iter().all(|row| row.len() == d)
                && st.b.len() == dn
                && st.w.len() == d
                && st.u.len() == config.num_actions;
            if !shapes_ok {
                return Err(Error::InvalidArgument(format!(
                    "coefficient shapes of stage {s} are inconsistent"
                )));
            }
            let reward_max = config.state_bound * st.w.iter().map(|x| x.abs()).sum::<f64>()
                + st.u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            specs.push(
                StageSpec::new(d, config.num_actions, 1, config.discounts[s])?
                    .with_exit_dim(dn)
                    .with_reward_max(reward_max),
            );
        }
        Ok(Self {
            config,
            seed,
            stages,
            specs,
        })
    }

    pub fn reward(&self, stage: usize, state: &[f64], action: usize) -> f64 {
        let st = &self.stages[stage];
        st.w.iter().zip(state).map(|(w, s)| w * s).sum::<f64>() + st.u[action]
    }

    /// `A_k s + B_k a` without noise.
    pub fn mean_next_state(&self, stage: usize, state: &[f64], action: usize) -> Vec<f64> {
        let st = &self.stages[stage];
        st.a.iter()
            .zip(&st.b)
            .map(|(row, b)| {
                row.iter().zip(state).map(|(x, s)| x * s).sum::<f64>() + b * action as f64
            })
            .collect()
    }
}

impl CyclicEnv for LinearEnv {
    fn stages(&self) -> &[StageSpec] {
        &self.specs
    }

    fn is_terminal(&self, _stage: usize, _state: &[f64], _action: usize) -> bool {
        true
    }

    fn stage_transition(&self, _stage: usize, exit_state: &[f64]) -> Vec<f64> {
        exit_state.to_vec()
    }

    fn step(
        &self,
        stage: usize,
        state: &[f64],
        action: usize,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        let mut next = self.mean_next_state(stage, state, action);
        if self.config.noise_sd > 0.0 {
            let noise = Normal::new(0.0, self.config.noise_sd).expect("valid normal");
            for x in &mut next {
                *x += noise.sample(rng);
            }
        }
        (self.reward(stage, state, action), next)
    }

    fn sample_initial(&self, stage: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let b = self.config.state_bound;
        (0..self.config.dims[stage])
            .map(|_| rng.random_range(-b..=b))
            .collect()
    }
}

impl<'de> Deserialize<'de> for LinearEnvSerde {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            config: LinearEnvConfig,
            seed: u64,
            stages: Vec<LinearStage>,
        }
        let raw = Raw::deserialize(d)?;
        LinearEnv::from_coefficients(raw.config, raw.seed, raw.stages)
            .map(LinearEnvSerde)
            .map_err(serde::de::Error::custom)
    }
}

/// Deserialization wrapper that rebuilds the stage specifications.
pub struct LinearEnvSerde(pub LinearEnv);
