use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclefqi::envs::{read_jsonl, sample_offline_dataset, write_jsonl, EnvConfig};
use cyclefqi::fqi::checkpoint::{load_qvector, save_qvector};
use cyclefqi::fqi::{train_cyclefqi, TrainConfig};
use cyclefqi::inference::ensemble_evaluate;
use cyclefqi::mdp::{CyclicEnv, PolicyVector};
use cyclefqi::regressors::{BasisKind, ForestParams, RegressorSpec};
use cyclefqi::rng;
use cyclefqi_experiments::{run, Error, ExperimentConfig, ExperimentKind, Result};

#[derive(Parser)]
#[command(name = "cyclefqi", version, about = "Offline RL for cyclic MDPs: experiments and tools")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an offline dataset under the uniform behavior policy (JSON lines).
    GenData(GenData),
    /// Train CycleFQI on a dataset and save the Q-vector.
    Train(Train),
    /// Monte Carlo value of a saved greedy policy, per stage.
    Eval(Eval),
    /// Sieve confidence region for the value of a policy learned from data.
    Infer(Infer),
    /// Joint coverage of the confidence regions on the linear environment.
    Coverage(Common),
    /// Q-Q data of D² against its chi-square limit.
    Qq(Common),
    /// Policy benchmark on the glucose simulator.
    Benchmark(Common),
    /// Choose the forest size for the benchmark.
    TuneForest(Common),
    /// Contraction and fixed-point checks on random finite cyclic MDPs.
    Contraction(Common),
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Print the full parameterization of an environment as JSON.
    Describe {
        name: String,
        #[arg(long, default_value_t = 0)]
        env_seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; omitted keys take the experiment's defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated per-stage sample sizes.
    #[arg(long, value_delimiter = ',')]
    n_per_stage: Option<Vec<usize>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Forest size, when the regressor is a random forest.
    #[arg(long)]
    trees: Option<usize>,
    /// Comma-separated stages to optimize; the rest follow uniform policies.
    #[arg(long, value_delimiter = ',')]
    update_set: Option<Vec<usize>>,
    #[arg(long)]
    env: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressorChoice {
    Linear,
    Forest,
    Tabular,
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, default_value = "linear")]
    env: String,
    /// Coefficient seed of the linear environment.
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
}

impl EnvArgs {
    fn config(&self) -> Result<EnvConfig> {
        let mut cfg = EnvConfig::from_name(&self.env)?;
        if let EnvConfig::Linear { seed, .. } = &mut cfg {
            *seed = self.env_seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    n_per_stage: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, value_enum, default_value = "linear")]
    regressor: RegressorChoice,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, value_delimiter = ',')]
    update_set: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn train_config(&self) -> TrainConfig {
        let spec = match self.regressor {
            RegressorChoice::Linear => RegressorSpec::linear(BasisKind::QuadraticSymmetric),
            RegressorChoice::Forest => RegressorSpec::forest(ForestParams {
                num_trees: self.trees,
                ..Default::default()
            }),
            RegressorChoice::Tabular => RegressorSpec::Tabular { default_value: 0.0 },
        };
        TrainConfig::new(self.iterations, spec).with_seed(self.seed)
    }

    /// Borrows the experiment config's update-set handling.
    fn constraints(&self, env_cfg: &EnvConfig, env: &dyn CyclicEnv) -> Result<cyclefqi::mdp::PolicyConstraints> {
        let cfg = ExperimentConfig {
            env: env_cfg.clone(),
            update_set: self.update_set.clone(),
            ..ExperimentConfig::defaults_for(ExperimentKind::Coverage)
        };
        cfg.constraints(env).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    trajectories: usize,
    /// Cycles per trajectory.
    #[arg(long, default_value_t = 50)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    folds: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    opts: TrainOpts,
}

fn load_config(kind: ExperimentKind, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::defaults_for(kind),
    };
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config file is for `{}`, not `{}`",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(name) = &c.env {
        cfg.env = EnvConfig::from_name(name).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(n) = &c.n_per_stage {
        cfg.n_per_stage = n.clone();
    }
    if let Some(f) = c.folds {
        cfg.folds = f;
    }
    if let Some(m) = c.iterations {
        cfg.iterations = m;
    }
    if let Some(u) = &c.update_set {
        cfg.update_set = Some(u.clone());
    }
    if let Some(trees) = c.trees {
        match &mut cfg.regressor {
            RegressorSpec::RandomForest(p) => p.num_trees = trees,
            _ => return Err(Error::Config("--trees needs a random-forest regressor".into())),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_data(path: &Path, env: &dyn CyclicEnv) -> Result<Vec<cyclefqi::mdp::StageDataset>> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_jsonl(file, env)?)
}

fn execute(cli: Cli) -> Result<()> {
    let experiment = |kind, c: &Common| -> Result<()> {
        let cfg = load_config(kind, c)?;
        let summary = run(&cfg)?;
        for line in &summary.lines {
            println!("{line}");
        }
        for p in &summary.artifacts {
            println!("wrote {}", p.display());
        }
        if summary.warnings > 0 {
            eprintln!("warning: {} trials failed", summary.warnings);
        }
        Ok(())
    };
    match cli.command {
        Command::Coverage(c) => experiment(ExperimentKind::Coverage, &c),
        Command::Qq(c) => experiment(ExperimentKind::Qq, &c),
        Command::Benchmark(c) => experiment(ExperimentKind::Benchmark, &c),
        Command::TuneForest(c) => experiment(ExperimentKind::TuneForest, &c),
        Command::Contraction(c) => experiment(ExperimentKind::Contraction, &c),
        Command::Env {
            command: EnvCommand::Describe { name, env_seed },
        } => {
            let cfg = EnvArgs { env: name, env_seed }.config()?;
            println!("{}", cfg.describe()?);
            Ok(())
        }
        Command::GenData(g) => {
            let cfg = g.env.config()?;
            let env = cfg.build()?;
            let behavior = PolicyVector::uniform(&env.action_counts());
            let data = sample_offline_dataset(
                env.as_ref(),
                &behavior,
                g.n_per_stage,
                &cfg.default_sampling(),
                &mut rng::stream(g.seed),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            write_jsonl(&data, output(g.out.as_deref())?)?;
            Ok(())
        }
        Command::Train(t) => {
            let cfg = t.env.config()?;
            let env = cfg.build()?;
            let data = read_data(&t.data, env.as_ref())?;
            let train = t.opts.train_config();
            let cons = t.opts.constraints(&cfg, env.as_ref())?;
            let (q, _) = train_cyclefqi(&data, env.as_ref(), cons, &train)?;
            save_qvector(&q, Some(&train), &t.out)?;
            println!("wrote {}", t.out.display());
            Ok(())
        }
        Command::Eval(e) => {
            let cfg = e.env.config()?;
            let env = cfg.build()?;
            let (q, _) = load_qvector(&e.model, &[])?;
            let policy = q.greedy_policy();
            println!("stage,mean,std_error,trajectories");
            for k in 0..env.num_stages() {
                let est = cyclefqi::mdp::monte_carlo_estimate(
                    env.as_ref(),
                    &policy,
                    k,
                    e.trajectories,
                    e.days,
                    &mut rng::child_stream(e.seed, &[k as u64]),
                )?;
                println!("{k},{},{},{}", est.mean, est.std_error, est.trajectories);
            }
            Ok(())
        }
        Command::Infer(i) => {
            let cfg = i.env.config()?;
            let env = cfg.build()?;
            let data = read_data(&i.data, env.as_ref())?;
            let train = i.opts.train_config();
            let cons = i.opts.constraints(&cfg, env.as_ref())?;
            let inference = cyclefqi::inference::InferenceConfig {
                folds: i.folds,
                ..Default::default()
            };
            let result = ensemble_evaluate(
                &data,
                env.as_ref(),
                &cons,
                &train,
                &inference,
                &mut rng::stream(i.opts.seed),
            )?;
            let record = result.to_record(i.level, None)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
