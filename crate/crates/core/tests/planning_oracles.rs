use aird::environments::{generate_flight_env, generate_grid_env, Cell, Environment, GridEnvironment, Trajectory};
use aird::planning::{
    expected_feature_counts, feature_count_gradient, plan_expected_features, sample_trajectories,
    soft_value_iteration, PlannerConfig,
};
use aird::reward_space::SpaceKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn chilly(seed: u64, size: usize, objects: usize) -> Environment {
    generate_grid_env(seed, size, objects, 0.3).unwrap().into()
}

fn random_walk(env: &Environment, steps: usize, rng: &mut impl Rng) -> Trajectory {
    let mut s = env.start();
    let mut states = vec![s];
    let mut actions = Vec::new();
    for _ in 0..steps {
        let a = rng.random_range(0..env.n_actions());
        s = env.successor(s, a).unwrap();
        actions.push(a);
        states.push(s);
    }
    Trajectory { states, actions }
}

/// Mean and standard error of per-trajectory features.
fn monte_carlo(env: &Environment, trajs: &[Trajectory], kind: SpaceKind) -> (Vec<f64>, Vec<f64>) {
    let m = kind.dim(env.n_features());
    let mut sum = vec![0.0; m];
    let mut sq = vec![0.0; m];
    for t in trajs {
        for (j, v) in env.trajectory_features(t, kind).unwrap().into_iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let n = trajs.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0) / n).sqrt()).collect();
    (mean, se)
}

#[test]
fn jacobian_matches_central_differences_on_small_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = PlannerConfig::default();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for point in 0..20 {
        let env = chilly(100 + point, 4, 3);
        let w: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let jac = feature_count_gradient(&env, &w, &cfg, SpaceKind::Linear).unwrap();
        let scale = jac.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for j in 0..w.len() {
            let mut hi = w.clone();
            hi[j] += h;
            let mut lo = w.clone();
            lo[j] -= h;
            let f_hi = plan_expected_features(&env, &hi, &cfg, SpaceKind::Linear).unwrap();
            let f_lo = plan_expected_features(&env, &lo, &cfg, SpaceKind::Linear).unwrap();
            for i in 0..3 {
                let fd = (f_hi[i] - f_lo[i]) / (2.0 * h);
                let denom = fd.abs().max(1e-3 * scale).max(1e-12);
                worst = worst.max((jac[[i, j]] - fd).abs() / denom);
            }
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn quadratic_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = PlannerConfig::default();
    let env = chilly(8, 4, 2);
    let w: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
    let jac = feature_count_gradient(&env, &w, &cfg, SpaceKind::Quadratic).unwrap();
    assert_eq!(jac.dim(), (5, 5));
    let scale = jac.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let h = 1e-4;
    for j in 0..5 {
        let mut hi = w.clone();
        hi[j] += h;
        let mut lo = w.clone();
        lo[j] -= h;
        let f_hi = plan_expected_features(&env, &hi, &cfg, SpaceKind::Quadratic).unwrap();
        let f_lo = plan_expected_features(&env, &lo, &cfg, SpaceKind::Quadratic).unwrap();
        for i in 0..5 {
            let fd = (f_hi[i] - f_lo[i]) / (2.0 * h);
            let rel = (jac[[i, j]] - fd).abs() / fd.abs().max(1e-3 * scale);
            assert!(rel < 1e-3, "entry ({i},{j}): {} vs {fd}", jac[[i, j]]);
        }
    }
}

#[test]
fn flight_jacobian_matches_central_differences() {
    let env: Environment = generate_flight_env(4, 12, 5).unwrap().into();
    let cfg = PlannerConfig::default();
    let w = vec![0.3, -1.0, 0.5, 0.0, 2.0];
    let jac = feature_count_gradient(&env, &w, &cfg, SpaceKind::Linear).unwrap();
    let h = 1e-5;
    for j in 0..5 {
        let mut hi = w.clone();
        hi[j] += h;
        let mut lo = w.clone();
        lo[j] -= h;
        let f_hi = plan_expected_features(&env, &hi, &cfg, SpaceKind::Linear).unwrap();
        let f_lo = plan_expected_features(&env, &lo, &cfg, SpaceKind::Linear).unwrap();
        for i in 0..5 {
            let fd = (f_hi[i] - f_lo[i]) / (2.0 * h);
            assert!((jac[[i, j]] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}

#[test]
fn uniform_policy_expectation_matches_monte_carlo() {
    let g = GridEnvironment::new(3, 3, vec![false; 9], vec![Cell::new(0, 0), Cell::new(2, 1)], Cell::new(1, 1), 0)
        .unwrap();
    let env = Environment::from(g);
    let policy = soft_value_iteration(&env, &[0.0, 0.0], 20, 0.5).unwrap();
    let exact = expected_feature_counts(&env, &policy, 2, SpaceKind::Linear).unwrap().expected_features;
    let mut trajs = Vec::with_capacity(1_000_000);
    for chunk in 0..10 {
        trajs.extend(sample_trajectories(&env, &policy, 100_000, 2, chunk).unwrap());
    }
    let (mean, se) = monte_carlo(&env, &trajs, SpaceKind::Linear);
    for j in 0..2 {
        assert!((mean[j] - exact[j]).abs() < 3.0 * se[j], "feature {j}: {} vs {}", mean[j], exact[j]);
    }
}

#[test]
fn soft_policy_expectations_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = PlannerConfig::default();
    for seed in 0..10 {
        let env = chilly(seed, 4, 2);
        let w: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let policy = soft_value_iteration(&env, &w, cfg.iterations, cfg.temperature).unwrap();
        for kind in [SpaceKind::Linear, SpaceKind::Quadratic] {
            let exact = expected_feature_counts(&env, &policy, 6, kind).unwrap().expected_features;
            let trajs = sample_trajectories(&env, &policy, 100_000, 6, seed).unwrap();
            let (mean, se) = monte_carlo(&env, &trajs, kind);
            for j in 0..exact.len() {
                let tol = 3.0 * se[j] + 1e-9;
                assert!((mean[j] - exact[j]).abs() < tol, "env {seed} {kind:?} feature {j}");
            }
        }
    }
}

#[test]
fn uniform_flight_choices_are_uniform() {
    let env: Environment = generate_flight_env(0, 10, 3).unwrap().into();
    let policy = soft_value_iteration(&env, &[0.0; 3], 20, 0.5).unwrap();
    let n = 100_000;
    let trajs = sample_trajectories(&env, &policy, n, 20, 9).unwrap();
    let mut counts = [0usize; 10];
    for t in &trajs {
        assert_eq!(t.states.len(), 2);
        counts[t.actions[0]] += 1;
    }
    let tv: f64 = counts.iter().map(|&c| (c as f64 / n as f64 - 0.1).abs()).sum::<f64>() / 2.0;
    assert!(tv < 1e-2, "total variation {tv}");
}

#[test]
fn stationary_walk_features_are_repeated_cell_features() {
    let g = GridEnvironment::new(2, 1, vec![false, false], vec![Cell::new(1, 0)], Cell::new(1, 0), 0).unwrap();
    let env = Environment::from(g);
    // moving right at the right edge stays put
    let traj = Trajectory { states: vec![1; 8], actions: vec![3; 7] };
    let f = env.trajectory_features(&traj, SpaceKind::Linear).unwrap();
    assert_eq!(f, vec![0.0]);
    let g = GridEnvironment::new(2, 1, vec![false, false], vec![Cell::new(1, 0)], Cell::new(0, 0), 0).unwrap();
    let env = Environment::from(g);
    let traj = Trajectory { states: vec![0; 6], actions: vec![2; 5] };
    let f = env.trajectory_features(&traj, SpaceKind::Linear).unwrap();
    assert_eq!(f, vec![-5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_features_are_per_step_sums(seed in 0u64..1000, walk in 0u64..1000) {
        let env = chilly(seed, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        let traj = random_walk(&env, 5, &mut rng);
        let got = env.trajectory_features(&traj, SpaceKind::Linear).unwrap();
        let mut want = vec![0.0; 3];
        for &s in &traj.states[1..] {
            for (w, v) in want.iter_mut().zip(env.state_features(s).unwrap()) {
                *w += v;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_features_are_additive(seed in 0u64..1000, walk in 0u64..1000, n1 in 0usize..8, n2 in 0usize..8) {
        let env = chilly(seed, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        let first = random_walk(&env, n1, &mut rng);
        let mut second = Trajectory { states: vec![*first.states.last().unwrap()], actions: vec![] };
        for _ in 0..n2 {
            let a = rng.random_range(0..4);
            let s = env.successor(*second.states.last().unwrap(), a).unwrap();
            second.actions.push(a);
            second.states.push(s);
        }
        let whole = first.concat(&second).unwrap();
        for kind in [SpaceKind::Linear, SpaceKind::Quadratic] {
            let a = env.trajectory_features(&first, kind).unwrap();
            let b = env.trajectory_features(&second, kind).unwrap();
            let ab = env.trajectory_features(&whole, kind).unwrap();
            for j in 0..ab.len() {
                prop_assert!((ab[j] - a[j] - b[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn occupancy_is_a_distribution(seed in 0u64..500, w0 in -3.0f64..3.0, w1 in -3.0f64..3.0) {
        let env = chilly(seed, 5, 2);
        let policy = soft_value_iteration(&env, &[w0, w1], 20, 0.5).unwrap();
        for row in policy.action_probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let occ = expected_feature_counts(&env, &policy, 7, SpaceKind::Linear).unwrap();
        let per_step = occ.per_step_state_occupancy.unwrap();
        for row in per_step.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
