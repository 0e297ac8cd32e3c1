use cyclefqi::envs::{
    glucose_reward, glucose_step_with_noise, GlucoseAction, GlucoseConfig, GlucoseState, Period,
};
use cyclefqi::mdp::tabular::{sup_distance, FiniteCyclicMdp, LayeredStage, QTables};
use cyclefqi::mdp::{
    constrained_state_value, cycle_index, rollout, PolicyConstraints, PolicyVector, UpdateSet,
};
use cyclefqi::regressors::{self, BasisKind, BasisSpec, ForestParams, RegressorSpec};
use cyclefqi::rng::stream;
use proptest::prelude::*;

fn arb_state() -> impl Strategy<Value = GlucoseState> {
    (
        50.0..450.0f64,
        -50.0..50.0f64,
        0u8..2,
        40.0..120.0f64,
        proptest::collection::vec(0.0..200.0f64, 9),
    )
        .prop_map(|(g, dg, sex, weight, n)| GlucoseState {
            t: 6.0,
            g,
            dg,
            sex: sex as f64,
            weight,
            c_m: n[0],
            p_m: n[1],
            f_m: n[2],
            c_d: n[3],
            p_d: n[4],
            f_d: n[5],
            c_e: n[6],
            p_e: n[7],
            f_e: n[8],
        })
}

fn arb_action() -> impl Strategy<Value = GlucoseAction> {
    (0u8..2, 0u8..3, 0u8..3, 0usize..3, 0u8..2, 0u8..2).prop_map(|(i, m, p, s, sr, h)| {
        GlucoseAction {
            insulin: i,
            meal: m,
            activity: p,
            sleep: [22.0, 23.0, 24.0][s],
            stress_reduction: sr,
            hydration: h,
        }
    })
}

fn table_like(mdp: &FiniteCyclicMdp, seed: u64) -> QTables {
    use rand::Rng;
    let mut r = stream(seed);
    mdp.finite_stages()
        .iter()
        .map(|st| {
            (0..st.num_states())
                .map(|_| (0..st.num_actions()).map(|_| r.random_range(-20.0..20.0)).collect())
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cycle_index_is_periodic(m in 1usize..10_000, k in 1usize..20) {
        let i = cycle_index(m, k).unwrap();
        prop_assert!((1..=k).contains(&i));
        prop_assert_eq!(i, cycle_index(m + k, k).unwrap());
    }

    #[test]
    fn constrained_value_lies_between_min_and_max(
        q in proptest::collection::vec(-100.0..100.0f64, 1..6),
        w in proptest::collection::vec(0.01..1.0f64, 6),
    ) {
        let probs: Vec<f64> = {
            let w = &w[..q.len()];
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        };
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let in_u = UpdateSet::new(2, [0]).unwrap();
        prop_assert_eq!(constrained_state_value(&q, 0, &in_u, None).unwrap(), hi);
        let v = constrained_state_value(&q, 1, &in_u, Some(&probs)).unwrap();
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn glucose_step_respects_bounds_and_bookkeeping(
        s in arb_state(),
        a in arb_action(),
        period in 0usize..4,
        noise in -500.0..500.0f64,
    ) {
        let period = Period::from_stage(period);
        let s = GlucoseState { t: [8.0, 12.0, 18.0, 22.0][period.stage()], ..s };
        let next = glucose_step_with_noise(period, &s, &a, &GlucoseConfig::default(), noise).unwrap();
        prop_assert!((50.0..=450.0).contains(&next.g));
        let morning = (s.c_m, s.p_m, s.f_m);
        let day = (s.c_d, s.p_d, s.f_d);
        let evening = (s.c_e, s.p_e, s.f_e);
        match period {
            Period::Morning => {
                prop_assert_eq!((next.c_d, next.p_d, next.f_d), day);
                prop_assert_eq!((next.c_e, next.p_e, next.f_e), evening);
                prop_assert!(next.c_m >= s.c_m);
            }
            Period::Day => {
                prop_assert_eq!((next.c_m, next.p_m, next.f_m), morning);
                prop_assert_eq!((next.c_e, next.p_e, next.f_e), evening);
            }
            Period::Evening => {
                prop_assert_eq!((next.c_m, next.p_m, next.f_m), morning);
                prop_assert_eq!((next.c_d, next.p_d, next.f_d), day);
            }
            Period::Night => {
                prop_assert_eq!(next.t, 6.0);
                prop_assert_eq!(next.c_m + next.c_d + next.c_e + next.f_e + next.p_e, 0.0);
            }
        }
    }

    #[test]
    fn glucose_reward_is_nonpositive_and_zero_only_in_band(
        g0 in 40.0..460.0f64,
        g1 in 40.0..460.0f64,
        night in any::<bool>(),
    ) {
        let r = glucose_reward(g0, g1, if night { 8.0 } else { 1.0 });
        prop_assert!(r <= 0.0);
        let all_in_band = (1..=10).all(|j| {
            let g = g0 + (g1 - g0) * (j as f64 - 0.5) / 10.0;
            (70.0..180.0).contains(&g)
        });
        prop_assert_eq!(r == 0.0, all_in_band);
    }

    #[test]
    fn bellman_operator_is_non_expansive(seed in 0u64..1000) {
        let layout = [
            LayeredStage { width: 3, horizon: 2, actions: 2, discount: 0.9, early_exit: 0.3, reward_range: (-1.0, 1.0) },
            LayeredStage { width: 2, horizon: 3, actions: 3, discount: 0.8, early_exit: 0.3, reward_range: (-1.0, 1.0) },
        ];
        let mdp = FiniteCyclicMdp::random_layered(&layout, seed % 2 == 0, &mut stream(seed)).unwrap();
        let cons = PolicyConstraints::all_stages(2);
        let (f, g) = (table_like(&mdp, seed), table_like(&mdp, seed + 1));
        let tf = mdp.apply_bellman_operator(&f, &cons).unwrap();
        let tg = mdp.apply_bellman_operator(&g, &cons).unwrap();
        prop_assert!(sup_distance(&tf, &tg) <= sup_distance(&f, &g) + 1e-10);
    }

    #[test]
    fn basis_dimensions(d in 1usize..8) {
        let sym = BasisSpec::new(BasisKind::QuadraticSymmetric, d).unwrap().feature_dim();
        prop_assert_eq!(sym, 1 + d + d * (d + 1) / 2);
        prop_assert_eq!(BasisSpec::new(BasisKind::Quadratic, d).unwrap().feature_dim(), 1 + d + d * d);
    }

    #[test]
    fn forest_predictions_stay_in_target_hull(
        xs in proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 2), 10..60),
        seed in 0u64..100,
    ) {
        use rand::Rng;
        let mut r = stream(seed);
        let ys: Vec<f64> = xs.iter().map(|_| r.random_range(-3.0..3.0)).collect();
        let spec = RegressorSpec::forest(ForestParams { num_trees: 5, ..Default::default() });
        let model = regressors::fit(&spec, &xs, &ys, &mut stream(seed)).unwrap();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for x in [vec![0.0, 0.0], vec![10.0, -10.0], xs[0].clone()] {
            let p = model.predict(&x).unwrap();
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn linear_fit_recovers_exact_quadratics(
        coef in proptest::collection::vec(-2.0..2.0f64, 6),
        seed in 0u64..100,
    ) {
        use rand::Rng;
        let mut r = stream(seed);
        let basis = BasisSpec::new(BasisKind::QuadraticSymmetric, 2).unwrap();
        let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| {
            basis.expand(x).unwrap().iter().zip(&coef).map(|(f, c)| f * c).sum()
        }).collect();
        let model = regressors::fit(&RegressorSpec::linear(BasisKind::QuadraticSymmetric), &xs, &ys, &mut stream(0)).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!((model.predict(x).unwrap() - y).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_reward_rollouts_are_zero() {
    let env = cyclefqi::envs::EnvConfig::from_name("zero").unwrap().build().unwrap();
    let policy = PolicyVector::uniform(&env.action_counts());
    let mut r = stream(4);
    for k in 0..4 {
        let s = env.sample_initial(k, &mut r);
        assert_eq!(rollout(env.as_ref(), &policy, k, &s, 3, &mut r).unwrap(), 0.0);
    }
}
