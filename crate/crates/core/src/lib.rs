//! Offline reinforcement learning for cyclic Markov decision processes.
//!
//! The crate provides the cyclic MDP model ([`mdp`]), pluggable regression
//! backends ([`regressors`]), cyclic fitted Q-iteration and a flattened
//! baseline ([`fqi`]), sieve-based inference for policy values
//! ([`inference`]) and two simulation environments ([`envs`]).

pub mod envs;
pub mod error;
pub mod fqi;
pub mod inference;
pub mod mdp;
pub mod regressors;
pub mod rng;

pub use error::{Error, Result};
