//! Simulation environments and offline data collection.

pub mod glucose;
pub mod linear;
pub mod registry;
pub mod sampling;

pub use glucose::{
    glucose_reward, glucose_step, glucose_step_with_noise, make_glucose_env, meal_nutrients,
    GlucoseAction, GlucoseConfig, GlucoseEnv, GlucoseState, Period,
};
pub use linear::{make_linear_env, LinearEnv, LinearEnvConfig, LinearEnvSerde, LinearStage};
pub use registry::{EnvConfig, ZeroRewardEnv, ENV_NAMES};
pub use sampling::{read_jsonl, sample_offline_dataset, write_jsonl, SamplingConfig};
