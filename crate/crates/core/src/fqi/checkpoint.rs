//! On-disk Q-vector checkpoints: a manifest plus one model file per
//! `(stage, action)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QVector, StageQ, TrainConfig};
use crate::error::{Error, Result};
use crate::mdp::{PolicyConstraints, PolicyKind, StagePolicy, UpdateSet};
use crate::regressors::{FittedModel, MODEL_FORMAT_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPolicyRecord {
    UniformRandom,
    /// A user-supplied policy; it must be passed back in when loading.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_stages: usize,
    pub state_dims: Vec<usize>,
    pub action_counts: Vec<usize>,
    pub update_set: UpdateSet,
    pub fixed_policies: Vec<Option<FixedPolicyRecord>>,
    pub config: Option<TrainConfig>,
}

fn model_file(stage: usize, action: usize) -> String {
    format!("stage{stage}_action{action}.json")
}

/// Writes `q` to the directory `dir`, creating it if needed.
pub fn save_qvector(q: &QVector, config: Option<&TrainConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = q.num_stages();
    let fixed_policies = (0..k)
        .map(|s| {
            q.constraints().fixed_policy(s).map(|p| match p.kind() {
                PolicyKind::UniformRandom => FixedPolicyRecord::UniformRandom,
                _ => FixedPolicyRecord::Custom,
            })
        })
        .collect();
    let manifest = Manifest {
        format_version: MODEL_FORMAT_VERSION,
        num_stages: k,
        state_dims: q.stages().map(|s| s.state_dim).collect(),
        action_counts: q.stages().map(|s| s.models.len()).collect(),
        update_set: q.update_set().clone(),
        fixed_policies,
        config: config.cloned(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for s in q.stages() {
        for (a, m) in s.models.iter().enumerate() {
            fs::write(dir.join(model_file(s.stage, a)), serde_json::to_string(m)?)?;
        }
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads a checkpoint. Stages saved with a custom fixed policy need an entry
/// in `custom`; uniform ones are rebuilt.
pub fn load_qvector(dir: &Path, custom: &[Option<StagePolicy>]) -> Result<(QVector, Manifest)> {
    let manifest = load_manifest(dir)?;
    let k = manifest.num_stages;
    let mut fixed = Vec::with_capacity(k);
    for (s, rec) in manifest.fixed_policies.iter().enumerate() {
        fixed.push(match rec {
            None => None,
            Some(FixedPolicyRecord::UniformRandom) => Some(StagePolicy::Uniform {
                actions: manifest.action_counts[s],
            }),
            Some(FixedPolicyRecord::Custom) => Some(
                custom
                    .get(s)
                    .cloned()
                    .flatten()
                    .ok_or(Error::MissingFixedPolicy { stage: s })?,
            ),
        });
    }
    let constraints = PolicyConstraints::new(manifest.update_set.clone(), fixed)?;
    let mut stages = Vec::with_capacity(k);
    for s in 0..k {
        let models = (0..manifest.action_counts[s])
            .map(|a| FittedModel::from_json(&fs::read_to_string(dir.join(model_file(s, a)))?))
            .collect::<Result<Vec<_>>>()?;
        stages.push(StageQ {
            stage: s,
            state_dim: manifest.state_dims[s],
            models,
        });
    }
    Ok((QVector::new(stages, constraints)?, manifest))
}
