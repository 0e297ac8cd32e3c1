use cyclefqi::envs::{make_linear_env, sample_offline_dataset, SamplingConfig};
use cyclefqi::inference::{
    assemble_global_system, chi2_quantile, estimate_covariance, expected_features, solve_beta,
    SieveLayout, DEFAULT_CONDITION_LIMIT,
};
use cyclefqi::mdp::{CyclicEnv, PolicyVector, StagePolicy};
use cyclefqi::regressors::BasisKind;
use cyclefqi::rng::stream;
use nalgebra::DMatrix;

fn threshold_policy() -> PolicyVector {
    PolicyVector::new(vec![
        StagePolicy::deterministic(2, |s| usize::from(s[0] > 0.0)),
        StagePolicy::deterministic(2, |s| usize::from(s[0] + s[1] > 0.5)),
        StagePolicy::Uniform { actions: 2 },
    ])
}

/// Columns an `(stage, action)` row of the system may touch: its own block
/// and the whole successor stage.
fn allowed(layout: &SieveLayout, row: usize, col: usize) -> bool {
    let k = (0..layout.num_stages())
        .find(|&k| layout.stage_range(k).contains(&row))
        .unwrap();
    let a = (0..layout.action_counts[k])
        .find(|&a| layout.block(k, a).contains(&row))
        .unwrap();
    let next = (k + 1) % layout.num_stages();
    layout.block(k, a).contains(&col) || layout.stage_range(next).contains(&col)
}

#[test]
fn sieve_system_properties_on_fifty_datasets() {
    for seed in 0..50u64 {
        let env = make_linear_env(seed).unwrap();
        let layout = SieveLayout::for_stages(env.stages(), BasisKind::QuadraticSymmetric).unwrap();
        assert_eq!(layout.total_dim, 30);
        let behavior = PolicyVector::uniform(&env.action_counts());
        let data = sample_offline_dataset(
            &env,
            &behavior,
            300,
            &SamplingConfig::Independent,
            &mut stream(1000 + seed),
        )
        .unwrap();
        let policy = if seed % 2 == 0 {
            threshold_policy()
        } else {
            PolicyVector::uniform(&env.action_counts())
        };
        let system = assemble_global_system(&data, &policy, &layout, &env).unwrap();
        let h = &system.h;

        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                if !allowed(&layout, i, j) {
                    assert_eq!(h[(i, j)], 0.0, "seed {seed} entry ({i}, {j})");
                }
            }
        }
        for k in 0..3 {
            for a in 0..2 {
                let start = layout.block(k, a).start;
                assert!(h[(start, start)] > 0.0, "intercept diagonal of block ({k}, {a})");
            }
        }

        let beta = solve_beta(&system, DEFAULT_CONDITION_LIMIT).unwrap();
        let residual = (h * &beta - &system.b).norm() / system.b.norm();
        assert!(residual <= 1e-8, "seed {seed} residual {residual:e}");

        let eu = expected_features(&layout, &policy, &env, 2000, &mut stream(seed)).unwrap();
        let sigma = estimate_covariance(&system, &beta, &eu, DEFAULT_CONDITION_LIMIT).unwrap();
        let asym = (&sigma - sigma.transpose()).amax();
        assert!(asym <= 1e-12 * sigma.amax(), "seed {seed}");
        let eig = sigma.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -1e-10 * sigma.trace(), "seed {seed}: {eig}");
    }
}

/// Regularized lower incomplete gamma for half-integer shape 3/2 in closed
/// form: `P(3/2, x) = erf(sqrt x) - 2 sqrt(x / pi) e^{-x}`.
fn p_three_halves(x: f64) -> f64 {
    let y = x.sqrt();
    // erf by Taylor series.
    let mut sum = 0.0;
    let mut term = y;
    for n in 0..300 {
        sum += term / (2 * n + 1) as f64;
        term *= -y * y / (n + 1) as f64;
    }
    let erf = 2.0 / std::f64::consts::PI.sqrt() * sum;
    erf - 2.0 * (x / std::f64::consts::PI).sqrt() * (-x).exp()
}

#[test]
fn chi2_quantile_against_incomplete_gamma_oracle() {
    let q = chi2_quantile(3, 0.95).unwrap();
    assert!((q - 7.8147).abs() <= 1e-3);
    assert!((p_three_halves(q / 2.0) - 0.95).abs() <= 1e-9);
}

#[test]
fn eu_rows_of_point_mass_policies_are_exact() {
    let env = make_linear_env(0).unwrap();
    let layout = SieveLayout::for_stages(env.stages(), BasisKind::QuadraticSymmetric).unwrap();
    let always_one = PolicyVector::new(
        (0..3)
            .map(|_| StagePolicy::deterministic(2, |_| 1))
            .collect(),
    );
    let eu: DMatrix<f64> = expected_features(&layout, &always_one, &env, 500, &mut stream(3)).unwrap();
    for k in 0..3 {
        // Only the action-1 block of stage k carries weight; its intercept is 1.
        assert_eq!(eu[(layout.block(k, 1).start, k)], 1.0);
        for i in layout.block(k, 0) {
            assert_eq!(eu[(i, k)], 0.0);
        }
    }
}
