use cyclefqi::envs::{sample_offline_dataset, LinearEnv, LinearEnvConfig, SamplingConfig};
use cyclefqi::fqi::{
    fit_seed, train_cyclefqi, train_flattened_fqi_with, CycleFqi, FlatActionEncoding,
    FlattenedConfig, TrainConfig,
};
use cyclefqi::mdp::tabular::{
    sup_distance, FiniteCyclicMdp, LayeredStage, QTables, TableEvaluator,
};
use cyclefqi::mdp::{
    bellman_target, CyclicEnv, PolicyConstraints, PolicyVector, QEvaluator, StageDataset, UpdateSet,
};
use cyclefqi::regressors::{self, BasisKind, ForestParams, RegressorSpec};
use cyclefqi::rng::stream;

fn two_stage(seed: u64) -> FiniteCyclicMdp {
    let stages = [
        LayeredStage {
            width: 4,
            horizon: 3,
            actions: 3,
            discount: 0.9,
            early_exit: 0.25,
            reward_range: (-1.0, 1.0),
        },
        LayeredStage {
            width: 5,
            horizon: 2,
            actions: 2,
            discount: 0.7,
            early_exit: 0.25,
            reward_range: (-1.0, 1.0),
        },
    ];
    FiniteCyclicMdp::random_layered(&stages, true, &mut stream(seed)).unwrap()
}

fn q_tables(q: &dyn QEvaluator, mdp: &FiniteCyclicMdp) -> QTables {
    mdp.finite_stages()
        .iter()
        .enumerate()
        .map(|(k, st)| {
            (0..st.num_states())
                .map(|s| q.q_values(k, &[s as f64]).unwrap())
                .collect()
        })
        .collect()
}

fn constraint_variants(mdp: &FiniteCyclicMdp) -> Vec<PolicyConstraints> {
    vec![
        PolicyConstraints::all_stages(2),
        PolicyConstraints::uniform_outside(UpdateSet::new(2, [1]).unwrap(), &mdp.action_counts())
            .unwrap(),
    ]
}

#[test]
fn tabular_cyclefqi_reaches_value_iteration_fixed_point() {
    for seed in 0..3 {
        let mdp = two_stage(seed);
        let data = mdp.exhaustive_dataset().unwrap();
        for cons in constraint_variants(&mdp) {
            let oracle = mdp.value_iteration(&cons, 1e-14, 100_000).unwrap();
            let cfg = TrainConfig::new(400, RegressorSpec::Tabular { default_value: 0.0 });
            let (q, policy) = train_cyclefqi(&data, &mdp, cons.clone(), &cfg).unwrap();
            let learned = q_tables(&q, &mdp);
            assert!(sup_distance(&learned, &oracle) <= 1e-8, "seed {seed}");

            let achieved = mdp.evaluate_policy(&policy, 1e-14, 100_000).unwrap();
            for k in 0..2 {
                for s in 0..mdp.finite_stages()[k].num_states() {
                    let probs = policy.probs(k, &[s as f64]).unwrap();
                    let v_pi: f64 = probs.iter().zip(&achieved[k][s]).map(|(p, x)| p * x).sum();
                    let probs_opt = cons.state_value(k, &[s as f64], &oracle[k][s]).unwrap();
                    assert!(
                        (v_pi - probs_opt).abs() <= 1e-6,
                        "seed {seed} stage {k} state {s}"
                    );
                }
            }
        }
    }
}

#[test]
fn bellman_targets_match_exact_backup() {
    let mdp = two_stage(7);
    let data = mdp.exhaustive_dataset().unwrap();
    let mut r = stream(1);
    for cons in constraint_variants(&mdp) {
        let tables: QTables = mdp
            .finite_stages()
            .iter()
            .map(|st| {
                (0..st.num_states())
                    .map(|_| {
                        (0..st.num_actions())
                            .map(|_| rand::Rng::random_range(&mut r, -3.0..3.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let backup = mdp.apply_bellman_operator(&tables, &cons).unwrap();
        let eval = TableEvaluator(tables);
        for ds in &data {
            for t in &ds.transitions {
                let y = bellman_target(t, &eval, &mdp, &cons).unwrap();
                let s = t.state[0] as usize;
                assert!((y - backup[t.stage][s][t.action]).abs() < 1e-12);
            }
        }
    }
}

fn linear_env(dims: Vec<usize>, seed: u64) -> LinearEnv {
    let k = dims.len();
    LinearEnv::new(
        LinearEnvConfig {
            dims,
            discounts: vec![0.9; k],
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn forest(trees: usize) -> RegressorSpec {
    RegressorSpec::forest(ForestParams {
        num_trees: trees,
        ..Default::default()
    })
}

#[test]
fn stage_fit_order_does_not_change_the_update() {
    let env = linear_env(vec![1, 2, 2], 3);
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        &env,
        &behavior,
        80,
        &SamplingConfig::Independent,
        &mut stream(5),
    )
    .unwrap();
    let cfg = TrainConfig::new(3, forest(10)).with_seed(11);
    let runner = CycleFqi::new(&env, &data, PolicyConstraints::all_stages(3), cfg).unwrap();
    let q1 = runner.run().unwrap();
    let targets = runner.compute_targets(&q1).unwrap();
    let forward = runner.fit_stages_in_order(4, &targets, &[0, 1, 2]).unwrap();
    for order in [[2, 1, 0], [1, 2, 0], [0, 2, 1]] {
        let other = runner.fit_stages_in_order(4, &targets, &order).unwrap();
        for k in 0..3 {
            assert_eq!(forward.stage(k), other.stage(k));
        }
    }
}

/// Plain single-MDP fitted Q-iteration: one model per action, target
/// `r + gamma * max_a Q(s', a)`.
fn reference_fqi(
    data: &StageDataset,
    gamma: f64,
    actions: usize,
    spec: &RegressorSpec,
    seed: u64,
    iterations: usize,
) -> Vec<Vec<f64>> {
    let mut models: Vec<Option<regressors::FittedModel>> = vec![None; actions];
    let mut all_targets = Vec::new();
    for m in 1..=iterations {
        let targets: Vec<f64> = data
            .transitions
            .iter()
            .map(|t| {
                let next_max = models
                    .iter()
                    .map(|mdl| {
                        mdl.as_ref()
                            .map_or(0.0, |f| f.predict(&t.next_state).unwrap())
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * next_max
            })
            .collect();
        for (a, slot) in models.iter_mut().enumerate() {
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = data
                .transitions
                .iter()
                .zip(&targets)
                .filter(|(t, _)| t.action == a)
                .map(|(t, y)| (t.state.clone(), *y))
                .unzip();
            *slot = Some(
                regressors::fit(spec, &xs, &ys, &mut stream(fit_seed(seed, m, 0, a))).unwrap(),
            );
        }
        all_targets.push(targets);
    }
    all_targets
}

#[test]
fn single_stage_reduces_to_standard_fqi() {
    let env = linear_env(vec![2], 8);
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        &env,
        &behavior,
        150,
        &SamplingConfig::Independent,
        &mut stream(2),
    )
    .unwrap();
    for spec in [
        RegressorSpec::linear(BasisKind::QuadraticSymmetric),
        forest(5),
    ] {
        let cfg = TrainConfig::new(50, spec).with_seed(21);
        let mut ours = Vec::new();
        CycleFqi::new(&env, &data, PolicyConstraints::all_stages(1), cfg.clone())
            .unwrap()
            .run_with(|rec| ours.push(rec.targets[0].clone()))
            .unwrap();
        let reference = reference_fqi(&data[0], 0.9, 2, &spec, 21, 50);
        assert_eq!(ours.len(), 50);
        for (a, b) in ours.iter().zip(&reference) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let mut flat = Vec::new();
        let flat_cfg = FlattenedConfig {
            stage_indicator: true,
            encoding: FlatActionEncoding::PerActionModels,
        };
        train_flattened_fqi_with(&data, &env, &cfg, flat_cfg, |_, t| flat.push(t.to_vec()))
            .unwrap();
        for (a, b) in flat.iter().zip(&reference) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let env = linear_env(vec![1, 2, 2], 1);
    let behavior = PolicyVector::uniform(&env.action_counts());
    let data = sample_offline_dataset(
        &env,
        &behavior,
        60,
        &SamplingConfig::Independent,
        &mut stream(3),
    )
    .unwrap();
    let cfg = TrainConfig::new(4, forest(8)).with_seed(99);
    let (a, _) = train_cyclefqi(&data, &env, PolicyConstraints::all_stages(3), &cfg).unwrap();
    let (b, _) = train_cyclefqi(&data, &env, PolicyConstraints::all_stages(3), &cfg).unwrap();
    for k in 0..3 {
        assert_eq!(a.stage(k), b.stage(k));
    }
}
