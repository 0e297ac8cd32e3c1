//! Experiment configuration: TOML files layered over per-kind defaults,
//! then command-line overrides.

use std::path::{Path, PathBuf};

use cyclefqi::envs::EnvConfig;
use cyclefqi::fqi::{FlattenedConfig, TrainConfig};
use cyclefqi::inference::InferenceConfig;
use cyclefqi::mdp::contraction::ContractionConfig;
use cyclefqi::mdp::{CyclicEnv, PolicyConstraints, UpdateSet};
use cyclefqi::regressors::{BasisKind, ForestParams, RegressorSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Coverage,
    Qq,
    Benchmark,
    TuneForest,
    Contraction,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Coverage => "coverage",
            ExperimentKind::Qq => "qq",
            ExperimentKind::Benchmark => "benchmark",
            ExperimentKind::TuneForest => "tune-forest",
            ExperimentKind::Contraction => "contraction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cyclefqi,
    Flattened,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cyclefqi => "cyclefqi",
            Method::Flattened => "flattened",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageOptions {
    pub level: f64,
    /// Draws per stage for the initial-state expectation of the features.
    /// Its Monte Carlo error is not part of the covariance estimate, so it
    /// must be small next to the smallest direction of that covariance.
    pub num_eta_samples: usize,
    /// Monte Carlo trajectories per stage for the ground truth.
    pub truth_trajectories: usize,
    /// Truncation tolerance on the remaining discounted mass.
    pub truth_tolerance: f64,
    /// Per-stage sample size of the dataset that trains the reference policy.
    pub reference_n_per_stage: usize,
    /// Debug: multiply every covariance estimate by this factor.
    pub sigma_inflation: f64,
    /// Debug (qq only): draw D² directly from the chi-square null.
    pub null_sampler: bool,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            num_eta_samples: 1_000_000,
            truth_trajectories: 1_000_000,
            truth_tolerance: 1e-4,
            reference_n_per_stage: 20_000,
            sigma_inflation: 1.0,
            null_sampler: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkOptions {
    pub methods: Vec<Method>,
    pub eval_trajectories: usize,
    pub eval_days: usize,
    pub eval_seed: u64,
    pub flattened: FlattenedConfig,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            methods: vec![Method::Cyclefqi, Method::Flattened, Method::Random],
            eval_trajectories: 100,
            eval_days: 50,
            eval_seed: 1001,
            flattened: FlattenedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneOptions {
    pub grid: Vec<usize>,
    pub methods: Vec<Method>,
    pub eval_trajectories: usize,
    pub eval_days: usize,
    pub eval_seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            grid: vec![100, 200, 300],
            methods: vec![Method::Cyclefqi, Method::Flattened],
            eval_trajectories: 100,
            eval_days: 10,
            eval_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub env: EnvConfig,
    /// Base seed; trial `t` uses `seed + t`.
    pub seed: u64,
    pub trials: usize,
    pub n_per_stage: Vec<usize>,
    pub folds: usize,
    pub iterations: usize,
    pub regressor: RegressorSpec,
    /// Stages whose policies are optimized; absent means all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_set: Option<Vec<usize>>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub coverage: CoverageOptions,
    #[serde(default)]
    pub benchmark: BenchmarkOptions,
    #[serde(default)]
    pub tune: TuneOptions,
    #[serde(default)]
    pub contraction: ContractionConfig,
}

impl ExperimentConfig {
    pub fn defaults_for(kind: ExperimentKind) -> Self {
        let linear = || EnvConfig::from_name("linear").expect("registered");
        let glucose = || EnvConfig::from_name("glucose").expect("registered");
        let forest = RegressorSpec::forest(ForestParams::default());
        let base = Self {
            kind,
            env: linear(),
            seed: 0,
            trials: 200,
            n_per_stage: vec![200, 400, 500, 800],
            folds: 2,
            iterations: 100,
            regressor: RegressorSpec::linear(BasisKind::QuadraticSymmetric),
            update_set: None,
            out_dir: PathBuf::from("results"),
            coverage: CoverageOptions::default(),
            benchmark: BenchmarkOptions::default(),
            tune: TuneOptions::default(),
            contraction: ContractionConfig::default(),
        };
        match kind {
            ExperimentKind::Coverage | ExperimentKind::Contraction => base,
            ExperimentKind::Qq => Self {
                n_per_stage: vec![800],
                ..base
            },
            ExperimentKind::Benchmark => Self {
                env: glucose(),
                seed: 1000,
                trials: 100,
                n_per_stage: vec![100, 200, 500],
                regressor: forest,
                ..base
            },
            ExperimentKind::TuneForest => Self {
                env: glucose(),
                seed: 0,
                trials: 1,
                n_per_stage: vec![200],
                regressor: forest,
                ..base
            },
        }
    }

    /// Parses a TOML document; keys it omits take the defaults of its `kind`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse()?;
        let kind = match user.get("kind") {
            Some(v) => ExperimentKind::deserialize(v.clone())
                .map_err(|e| Error::Config(format!("kind: {e}")))?,
            None => return Err(Error::Config("missing `kind`".into())),
        };
        let defaults = toml::Table::try_from(Self::defaults_for(kind))?;
        let merged = merge(defaults, user);
        let cfg = Self::deserialize(merged).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig::new(self.iterations, self.regressor).with_seed(seed)
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            folds: self.folds,
            num_eta_samples: self.coverage.num_eta_samples,
            ..InferenceConfig::default()
        }
    }

    /// The update set with uniform-random fixed policies outside it.
    pub fn constraints(&self, env: &dyn CyclicEnv) -> Result<PolicyConstraints> {
        let k = env.num_stages();
        Ok(match &self.update_set {
            None => PolicyConstraints::all_stages(k),
            Some(members) => {
                let u = UpdateSet::new(k, members.iter().copied())?;
                PolicyConstraints::uniform_outside(u, &env.action_counts())?
            }
        })
    }

    /// Label of the update set for reports, e.g. `all` or `0+2`.
    pub fn update_set_label(&self) -> String {
        match &self.update_set {
            None => "all".into(),
            Some(m) => m
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    /// Checks that every name resolves and every size is usable.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let env = self.env.build().map_err(|e| Error::Config(format!("env: {e}")))?;
        self.constraints(env.as_ref())
            .map_err(|e| Error::Config(format!("update_set: {e}")))?;
        self.train_config(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.kind == ExperimentKind::Contraction {
            return Ok(());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.n_per_stage.is_empty() || self.n_per_stage.contains(&0) {
            return bad("n_per_stage must list positive sizes".into());
        }
        match self.kind {
            ExperimentKind::Coverage | ExperimentKind::Qq => {
                if self.env.name() != "linear" {
                    return bad(format!(
                        "{} runs on the linear environment, not {}",
                        self.kind.name(),
                        self.env.name()
                    ));
                }
                if self.folds < 2 {
                    return bad("folds must be at least 2".into());
                }
                let c = &self.coverage;
                if !(c.level > 0.0 && c.level < 1.0) {
                    return bad(format!("level {} outside (0, 1)", c.level));
                }
                if !(c.sigma_inflation > 0.0 && c.sigma_inflation.is_finite()) {
                    return bad("sigma_inflation must be positive".into());
                }
                if c.truth_trajectories == 0 || c.reference_n_per_stage == 0 {
                    return bad("ground truth needs trajectories and reference data".into());
                }
                if c.num_eta_samples == 0 {
                    return bad("num_eta_samples must be positive".into());
                }
            }
            ExperimentKind::Benchmark => {
                let b = &self.benchmark;
                if b.methods.is_empty() || b.eval_trajectories == 0 || b.eval_days == 0 {
                    return bad("benchmark needs methods, trajectories and days".into());
                }
                if self.env.name() == "linear" {
                    return bad("benchmark runs on the glucose environment".into());
                }
            }
            ExperimentKind::TuneForest => {
                let t = &self.tune;
                if t.grid.is_empty() || t.grid.contains(&0) {
                    return bad("tune grid must list positive tree counts".into());
                }
                if t.methods.is_empty() || t.methods.contains(&Method::Random) {
                    return bad("tune methods must be cyclefqi and/or flattened".into());
                }
                if t.eval_trajectories == 0 || t.eval_days == 0 {
                    return bad("tune needs trajectories and days".into());
                }
                if !matches!(self.regressor, RegressorSpec::RandomForest(_)) {
                    return bad("tune-forest needs a random-forest regressor".into());
                }
                if self.env.name() == "linear" {
                    return bad("tune-forest runs on the glucose environment".into());
                }
            }
            ExperimentKind::Contraction => {}
        }
        Ok(())
    }
}

/// Overlays `user` on `base`. Tables tagged by `name` or `kind` are replaced
/// wholesale when the tag changes, since their fields differ by variant.
fn merge(mut base: toml::Table, user: toml::Table) -> toml::Value {
    for (key, value) in user {
        let merged = match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !retagged(&b, &u) => {
                merge(b, u)
            }
            (_, v) => v,
        };
        base.insert(key, merged);
    }
    toml::Value::Table(base)
}

fn retagged(base: &toml::Table, user: &toml::Table) -> bool {
    ["name", "kind"]
        .iter()
        .any(|tag| matches!((base.get(*tag), user.get(*tag)), (Some(a), Some(b)) if a != b))
}
