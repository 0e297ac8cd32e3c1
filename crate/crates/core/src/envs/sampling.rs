//! Offline dataset generation and JSON-lines storage.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::seq::index;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{split_by_stage, CyclicEnv, PolicyVector, StageDataset, Transition};
use crate::rng;

/// How transitions are harvested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingConfig {
    /// Each transition starts from a fresh draw of the stage's entry distribution.
    Independent,
    /// Whole trajectories from stage 0; each stage is subsampled to the requested size.
    Trajectories {
        /// Cycles per trajectory.
        cycles: usize,
        /// Leading cycles discarded before harvesting.
        warmup_cycles: usize,
    },
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig::Independent
    }
}

const TRAJECTORY_BATCH: usize = 32;

/// Draws `n_per_stage` transitions for every stage under `behavior`.
///
/// The output depends only on `env`, `behavior`, `n_per_stage`, `config` and
/// the single value drawn from `rng`, not on thread scheduling.
pub fn sample_offline_dataset(
    env: &dyn CyclicEnv,
    behavior: &PolicyVector,
    n_per_stage: usize,
    config: &SamplingConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<StageDataset>> {
    if n_per_stage == 0 {
        return Err(Error::InvalidArgument(
            "n_per_stage must be at least 1".into(),
        ));
    }
    if behavior.num_stages() != env.num_stages() {
        return Err(Error::DimensionMismatch {
            context: "behavior policy stages",
            expected: env.num_stages(),
            actual: behavior.num_stages(),
        });
    }
    let base = rng.next_u64();
    match *config {
        SamplingConfig::Independent => independent(env, behavior, n_per_stage, base),
        SamplingConfig::Trajectories {
            cycles,
            warmup_cycles,
        } => {
            if cycles <= warmup_cycles {
                return Err(Error::InvalidArgument(
                    "trajectories need more cycles than warmup cycles".into(),
                ));
            }
            trajectories(env, behavior, n_per_stage, cycles, warmup_cycles, base)
        }
    }
}

fn one_step(
    env: &dyn CyclicEnv,
    behavior: &PolicyVector,
    stage: usize,
    state: Vec<f64>,
    r: &mut dyn RngCore,
) -> Result<Transition> {
    let action = behavior.sample(stage, &state, r)?;
    let terminal = env.is_terminal(stage, &state, action);
    let (reward, next_state) = env.step(stage, &state, action, r);
    Ok(Transition {
        stage,
        state,
        action,
        reward,
        next_state,
        terminal,
    })
}

fn independent(
    env: &dyn CyclicEnv,
    behavior: &PolicyVector,
    n: usize,
    base: u64,
) -> Result<Vec<StageDataset>> {
    (0..env.num_stages())
        .map(|k| {
            let transitions = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng::child_stream(base, &[k as u64, i]);
                    let s = env.sample_initial(k, &mut r);
                    one_step(env, behavior, k, s, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StageDataset {
                stage: k,
                transitions,
            })
        })
        .collect()
}

fn roll_trajectory(
    env: &dyn CyclicEnv,
    behavior: &PolicyVector,
    cycles: usize,
    warmup: usize,
    r: &mut dyn RngCore,
) -> Result<Vec<Transition>> {
    let stages = env.stages();
    let mut out = Vec::new();
    let mut state = env.sample_initial(0, r);
    for cycle in 0..cycles {
        for (k, spec) in stages.iter().enumerate() {
            let mut steps = 0;
            loop {
                steps += 1;
                let mut tr = one_step(env, behavior, k, state, r)?;
                // An environment that overruns its horizon is cut off here, as in rollouts.
                tr.terminal |= steps >= spec.horizon;
                let terminal = tr.terminal;
                state = if terminal {
                    env.stage_transition(k, &tr.next_state)
                } else {
                    tr.next_state.clone()
                };
                if cycle >= warmup {
                    out.push(tr);
                }
                if terminal {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn trajectories(
    env: &dyn CyclicEnv,
    behavior: &PolicyVector,
    n: usize,
    cycles: usize,
    warmup: usize,
    base: u64,
) -> Result<Vec<StageDataset>> {
    let num_stages = env.num_stages();
    let mut pools: Vec<Vec<Transition>> = vec![Vec::new(); num_stages];
    let mut next_traj = 0u64;
    while pools.iter().any(|p| p.len() < n) {
        let batch = (next_traj..next_traj + TRAJECTORY_BATCH as u64)
            .into_par_iter()
            .map(|j| {
                roll_trajectory(
                    env,
                    behavior,
                    cycles,
                    warmup,
                    &mut rng::child_stream(base, &[j]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        next_traj += TRAJECTORY_BATCH as u64;
        for tr in batch.into_iter().flatten() {
            pools[tr.stage].push(tr);
        }
    }
    let mut out = Vec::with_capacity(num_stages);
    for (k, pool) in pools.into_iter().enumerate() {
        let mut r = rng::child_stream(base, &[u64::MAX, k as u64]);
        let mut picked = index::sample(&mut r, pool.len(), n).into_vec();
        picked.sort_unstable();
        let mut slots: Vec<Option<Transition>> = pool.into_iter().map(Some).collect();
        let transitions = picked
            .into_iter()
            .map(|i| slots[i].take().expect("distinct indices"))
            .collect();
        out.push(StageDataset {
            stage: k,
            transitions,
        });
    }
    Ok(out)
}

/// Writes every transition as one JSON object per line, stage by stage.
pub fn write_jsonl(datasets: &[StageDataset], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for ds in datasets {
        for tr in &ds.transitions {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines file written by [`write_jsonl`] and validates it against `env`.
pub fn read_jsonl(reader: impl Read, env: &dyn CyclicEnv) -> Result<Vec<StageDataset>> {
    let mut transitions = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tr: Transition = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("dataset line {}: {e}", i + 1)))?;
        tr.validate(env.stages())?;
        transitions.push(tr);
    }
    split_by_stage(env.num_stages(), transitions)
}
