use aird::environments::{generate_flight_env, generate_grid_env, Cell, Environment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent transcription of the map sampling order: object cells, then
/// a wall coin per non-object cell in row-major order, then the start.
fn reference_grid(seed: u64, size: usize, n_objects: usize, wall_prob: f64) -> (Vec<bool>, Vec<(usize, usize)>, (usize, usize)) {
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = rand::seq::index::sample(&mut rng, n, n_objects).into_vec();
    let mut walls = vec![false; n];
    for (s, wall) in walls.iter_mut().enumerate() {
        if objects.contains(&s) {
            continue;
        }
        *wall = rng.random::<f64>() < wall_prob;
    }
    let free: Vec<usize> = (0..n).filter(|&s| !walls[s]).collect();
    let start = free[rng.random_range(0..free.len())];
    let xy = |s: usize| (s % size, s / size);
    (walls, objects.into_iter().map(xy).collect(), xy(start))
}

#[test]
fn small_map_golden_output() {
    let g = generate_grid_env(3, 4, 2, 0.3).unwrap();
    let json = Environment::from(g.clone()).to_json().unwrap();
    assert_eq!(
        json,
        r#"{"kind":"grid","width":4,"height":4,"walls":"1001001110100000","objects":[[1,0],[1,2]],"start":[1,0],"seed":3}"#
    );
    let (walls, objects, start) = reference_grid(3, 4, 2, 0.3);
    assert_eq!(g.walls, walls);
    assert_eq!(g.objects, objects.iter().map(|&(x, y)| Cell::new(x, y)).collect::<Vec<_>>());
    assert_eq!((g.start.x, g.start.y), start);
}

#[test]
fn flight_matrix_is_row_major_standard_normal() {
    let f = generate_flight_env(17, 6, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..6 {
        for j in 0..4 {
            let v: f64 = rng.sample(StandardNormal);
            assert_eq!(f.features[[i, j]], v);
        }
    }
}

#[test]
fn flight_state_features_are_matrix_rows() {
    let f = generate_flight_env(2, 30, 5).unwrap();
    let env = Environment::from(f.clone());
    for i in 0..30 {
        assert_eq!(env.state_features(i + 1).unwrap(), f.features.row(i).to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_matches_reference_sampler(seed in 0u64..10_000, size in 2usize..9, wall_prob in 0.0f64..0.6) {
        let n_objects = (size * size / 4).max(1);
        let g = generate_grid_env(seed, size, n_objects, wall_prob).unwrap();
        let (walls, objects, start) = reference_grid(seed, size, n_objects, wall_prob);
        prop_assert_eq!(&g.walls, &walls);
        prop_assert_eq!(g.objects.iter().map(|c| (c.x, c.y)).collect::<Vec<_>>(), objects);
        prop_assert_eq!((g.start.x, g.start.y), start);
    }

    #[test]
    fn regeneration_is_deterministic(seed in any::<u64>()) {
        let a = Environment::from(generate_grid_env(seed, 6, 8, 0.3).unwrap()).to_json().unwrap();
        let b = Environment::from(generate_grid_env(seed, 6, 8, 0.3).unwrap()).to_json().unwrap();
        prop_assert_eq!(a, b);
        let f = generate_flight_env(seed, 10, 4).unwrap();
        let g = generate_flight_env(seed, 10, 4).unwrap();
        prop_assert_eq!(f.features, g.features);
    }

    #[test]
    fn json_round_trip_preserves_features(seed in any::<u64>()) {
        let env = Environment::from(generate_grid_env(seed, 5, 4, 0.3).unwrap());
        let back = Environment::from_json(&env.to_json().unwrap()).unwrap();
        for s in 0..env.n_states() {
            prop_assert_eq!(env.state_features(s).unwrap(), back.state_features(s).unwrap());
            for a in 0..4 {
                prop_assert_eq!(env.successor(s, a).unwrap(), back.successor(s, a).unwrap());
            }
        }
    }

    #[test]
    fn grid_features_are_negative_distances(seed in any::<u64>()) {
        let g = generate_grid_env(seed, 5, 3, 0.2).unwrap();
        let env = Environment::from(g.clone());
        for s in 0..env.n_states() {
            let c = Cell::new(s % 5, s / 5);
            let f = env.state_features(s).unwrap();
            for (j, o) in g.objects.iter().enumerate() {
                let d = ((c.x as f64 - o.x as f64).powi(2) + (c.y as f64 - o.y as f64).powi(2)).sqrt();
                prop_assert!((f[j] + d).abs() < 1e-12);
            }
        }
    }
}
