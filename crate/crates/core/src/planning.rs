//! Soft value iteration, exact expected feature counts by occupancy
//! propagation, rollouts, and forward-mode derivatives of expected feature
//! counts with respect to the planning weights.
//!
//! Rewards are earned on entering a state: `r(s') = w . phi(s')`. The soft
//! Bellman backup is
//!
//! ```text
//! Q_k(s, a) = r(s') + V_{k-1}(s'),   V_0 = 0
//! V_k(s)    = tau * logsumexp_a(Q_k(s, a) / tau)
//! ```
//!
//! and the returned stationary policy is `softmax(Q_K(s, .) / tau)`. The
//! flight domain is a single decision, so it reduces to one softmax over
//! flight utilities.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::{Environment, Trajectory};
use crate::error::{check_dim, check_finite, invalid, Error, Result};
use crate::reward_space::{dot, expanded_dim, SpaceKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Soft value iteration sweeps.
    pub iterations: usize,
    pub temperature: f64,
    /// Steps per trajectory (always one for flights).
    pub horizon: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { iterations: 20, temperature: 0.5, horizon: 20 }
    }
}

impl PlannerConfig {
    /// Stable FNV-1a hash of the settings, used to key persisted caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let words = [self.iterations as u64, self.temperature.to_bits(), self.horizon as u64];
        for w in words {
            for b in w.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Stochastic policy from soft value iteration. Flight policies have a single
/// row (the pre-decision state).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPolicy {
    pub action_probs: Array2<f64>,
    pub values: Vec<f64>,
    pub q_values: Array2<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyResult {
    pub expected_features: Vec<f64>,
    /// Row `t` holds the state distribution after `t + 1` steps.
    pub per_step_state_occupancy: Option<Array2<f64>>,
}

/// Picks the feature basis a weight vector plans in, by its length.
pub fn planning_kind(env: &Environment, weights: &[f64]) -> Result<SpaceKind> {
    let d = env.n_features();
    if weights.len() == d {
        Ok(SpaceKind::Linear)
    } else if weights.len() == expanded_dim(d) {
        Ok(SpaceKind::Quadratic)
    } else {
        Err(Error::DimensionMismatch { expected: d, got: weights.len() })
    }
}

fn rewards(rows: ArrayView2<'_, f64>, weights: &[f64]) -> Vec<f64> {
    rows.rows().into_iter().map(|r| dot(r.as_slice().expect("standard layout"), weights)).collect()
}

/// Writes `softmax(q / tau)` into `out` and returns `tau * logsumexp(q / tau)`.
fn soft_max_into(q: &[f64], tau: f64, out: &mut [f64]) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(q) {
        *o = ((v - m) / tau).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    m + tau * z.ln()
}

fn check_weights(env: &Environment, weights: &[f64]) -> Result<SpaceKind> {
    check_finite(weights, "reward weights")?;
    planning_kind(env, weights)
}

pub fn soft_value_iteration(
    env: &Environment,
    weights: &[f64],
    iterations: usize,
    temperature: f64,
) -> Result<SoftPolicy> {
    PlannerConfig { iterations, temperature, horizon: 0 }.validate()?;
    let kind = check_weights(env, weights)?;
    let r = rewards(env.feature_rows(kind).view(), weights);
    match env {
        Environment::Flight(_) => {
            let mut probs = vec![0.0; r.len()];
            let v = soft_max_into(&r, temperature, &mut probs);
            let n = r.len();
            Ok(SoftPolicy {
                action_probs: Array2::from_shape_vec((1, n), probs).expect("shape"),
                values: vec![v],
                q_values: Array2::from_shape_vec((1, n), r).expect("shape"),
                temperature,
            })
        }
        Environment::Grid(g) => {
            let solve = grid_soft_vi(&g.successors, &r, None, iterations, temperature);
            let s = g.successors.len();
            Ok(SoftPolicy {
                action_probs: Array2::from_shape_vec((s, 4), solve.pi).expect("shape"),
                values: solve.v,
                q_values: Array2::from_shape_vec((s, 4), solve.q).expect("shape"),
                temperature,
            })
        }
    }
}

struct GridSolve {
    q: Vec<f64>,
    v: Vec<f64>,
    pi: Vec<f64>,
    /// `d Q_K(s, a) / d w_dir`, laid out `[(s * 4 + a) * n_dirs + j]`.
    dq: Vec<f64>,
}

/// Soft value iteration on the grid. `tangent` holds, per state, the
/// derivative of the state reward along each requested direction
/// (`[s * n_dirs + j]`).
fn grid_soft_vi(
    succ: &[[usize; 4]],
    r: &[f64],
    tangent: Option<(&[f64], usize)>,
    iterations: usize,
    tau: f64,
) -> GridSolve {
    const A: usize = 4;
    let n = succ.len();
    let (dr, nd) = tangent.unwrap_or((&[], 0));
    let mut v = vec![0.0; n];
    let mut dv = vec![0.0; n * nd];
    let mut q = vec![0.0; n * A];
    let mut dq = vec![0.0; n * A * nd];
    let mut pi = vec![1.0 / A as f64; n * A];
    let mut v_next = vec![0.0; n];
    let mut dv_next = vec![0.0; n * nd];
    for _ in 0..iterations {
        for s in 0..n {
            for a in 0..A {
                let t = succ[s][a];
                q[s * A + a] = r[t] + v[t];
                let row = &mut dq[(s * A + a) * nd..(s * A + a + 1) * nd];
                for j in 0..nd {
                    row[j] = dr[t * nd + j] + dv[t * nd + j];
                }
            }
            v_next[s] = soft_max_into(&q[s * A..s * A + A], tau, &mut pi[s * A..s * A + A]);
            let out = &mut dv_next[s * nd..(s + 1) * nd];
            out.fill(0.0);
            for a in 0..A {
                let p = pi[s * A + a];
                for j in 0..nd {
                    out[j] += p * dq[(s * A + a) * nd + j];
                }
            }
        }
        std::mem::swap(&mut v, &mut v_next);
        std::mem::swap(&mut dv, &mut dv_next);
    }
    GridSolve { q, v, pi, dq }
}

/// `d pi(a|s) / d w_dir` from `d Q`, same layout as `dq`.
fn policy_tangent(pi: &[f64], dq: &[f64], nd: usize, tau: f64) -> Vec<f64> {
    const A: usize = 4;
    let n = pi.len() / A;
    let mut dpi = vec![0.0; dq.len()];
    let mut mean = vec![0.0; nd];
    for s in 0..n {
        mean.fill(0.0);
        for a in 0..A {
            let p = pi[s * A + a];
            for j in 0..nd {
                mean[j] += p * dq[(s * A + a) * nd + j];
            }
        }
        for a in 0..A {
            let p = pi[s * A + a];
            for j in 0..nd {
                let k = (s * A + a) * nd + j;
                dpi[k] = p * (dq[k] - mean[j]) / tau;
            }
        }
    }
    dpi
}

struct GridOccupancy {
    total: Vec<f64>,
    dtotal: Vec<f64>,
    per_step: Option<Vec<f64>>,
}

fn grid_occupancy(
    succ: &[[usize; 4]],
    start: usize,
    pi: &[f64],
    dpi: Option<(&[f64], usize)>,
    horizon: usize,
    record_steps: bool,
) -> GridOccupancy {
    const A: usize = 4;
    let n = succ.len();
    let (dpi, nd) = dpi.unwrap_or((&[], 0));
    let mut d = vec![0.0; n];
    d[start] = 1.0;
    let mut dd = vec![0.0; n * nd];
    let mut total = vec![0.0; n];
    let mut dtotal = vec![0.0; n * nd];
    let mut per_step = record_steps.then(|| Vec::with_capacity(horizon * n));
    let mut d_next = vec![0.0; n];
    let mut dd_next = vec![0.0; n * nd];
    for _ in 0..horizon {
        d_next.fill(0.0);
        dd_next.fill(0.0);
        for s in 0..n {
            let mass = d[s];
            let live = mass != 0.0 || dd[s * nd..(s + 1) * nd].iter().any(|&x| x != 0.0);
            if !live {
                continue;
            }
            for a in 0..A {
                let t = succ[s][a];
                let p = pi[s * A + a];
                d_next[t] += mass * p;
                for j in 0..nd {
                    dd_next[t * nd + j] += dd[s * nd + j] * p + mass * dpi[(s * A + a) * nd + j];
                }
            }
        }
        std::mem::swap(&mut d, &mut d_next);
        std::mem::swap(&mut dd, &mut dd_next);
        for (acc, x) in total.iter_mut().zip(&d) {
            *acc += x;
        }
        for (acc, x) in dtotal.iter_mut().zip(&dd) {
            *acc += x;
        }
        if let Some(steps) = per_step.as_mut() {
            steps.extend_from_slice(&d);
        }
    }
    GridOccupancy { total, dtotal, per_step }
}

/// `rows^T occupancy`
fn weighted_rows(rows: ArrayView2<'_, f64>, occupancy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows.ncols()];
    for (row, &w) in rows.rows().into_iter().zip(occupancy) {
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(row.iter()) {
            *o += w * f;
        }
    }
    out
}

fn check_policy(env: &Environment, policy: &SoftPolicy) -> Result<()> {
    let expected_rows = match env {
        Environment::Flight(_) => 1,
        Environment::Grid(_) => env.n_states(),
    };
    check_dim(expected_rows, policy.action_probs.nrows())?;
    check_dim(env.n_actions(), policy.action_probs.ncols())
}

/// Exact expected (possibly expanded) feature counts of the policy over
/// `horizon` steps from the start state.
pub fn expected_feature_counts(
    env: &Environment,
    policy: &SoftPolicy,
    horizon: usize,
    kind: SpaceKind,
) -> Result<OccupancyResult> {
    check_policy(env, policy)?;
    let rows = env.feature_rows(kind);
    match env {
        Environment::Flight(_) => {
            if horizon == 0 {
                return Ok(OccupancyResult { expected_features: vec![0.0; rows.ncols()], per_step_state_occupancy: None });
            }
            let probs = policy.action_probs.row(0).to_vec();
            let expected = weighted_rows(rows.view(), &probs);
            let mut occ = vec![0.0];
            occ.extend_from_slice(&probs);
            let n = occ.len();
            Ok(OccupancyResult {
                expected_features: expected,
                per_step_state_occupancy: Some(Array2::from_shape_vec((1, n), occ).expect("shape")),
            })
        }
        Environment::Grid(g) => {
            let pi = policy.action_probs.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
            let occ = grid_occupancy(&g.successors, env.start(), &pi, None, horizon, true);
            let n = g.successors.len();
            Ok(OccupancyResult {
                expected_features: weighted_rows(rows.view(), &occ.total),
                per_step_state_occupancy: occ
                    .per_step
                    .map(|v| Array2::from_shape_vec((horizon, n), v).expect("shape")),
            })
        }
    }
}

/// Plans with soft value iteration and returns the expected features in the
/// basis of `kind`.
pub fn plan_expected_features(
    env: &Environment,
    weights: &[f64],
    config: &PlannerConfig,
    kind: SpaceKind,
) -> Result<Vec<f64>> {
    let policy = soft_value_iteration(env, weights, config.iterations, config.temperature)?;
    Ok(expected_feature_counts(env, &policy, config.horizon, kind)?.expected_features)
}

/// Expected features and their Jacobian with respect to a subset of the
/// planning weights.
#[derive(Debug, Clone)]
pub struct FeatureSensitivity {
    pub expected_features: Vec<f64>,
    /// `features x directions`
    pub jacobian: Array2<f64>,
}

/// Forward-mode differentiation through soft value iteration and occupancy
/// propagation. `directions` are indices into the planning weights.
pub fn feature_sensitivity(
    env: &Environment,
    weights: &[f64],
    config: &PlannerConfig,
    kind: SpaceKind,
    directions: &[usize],
) -> Result<FeatureSensitivity> {
    config.validate()?;
    let plan_kind = check_weights(env, weights)?;
    if let Some(&bad) = directions.iter().find(|&&j| j >= weights.len()) {
        return Err(invalid(format!("direction {bad} out of range")));
    }
    let plan_rows = env.feature_rows(plan_kind);
    let acc_rows = env.feature_rows(kind);
    let nd = directions.len();
    let tau = config.temperature;
    let r = rewards(plan_rows.view(), weights);
    let mut jac = Array2::zeros((acc_rows.ncols(), nd));
    match env {
        Environment::Flight(_) => {
            if config.horizon == 0 {
                return Ok(FeatureSensitivity { expected_features: vec![0.0; acc_rows.ncols()], jacobian: jac });
            }
            let mut p = vec![0.0; r.len()];
            soft_max_into(&r, tau, &mut p);
            let expected = weighted_rows(acc_rows.view(), &p);
            for (j, &dir) in directions.iter().enumerate() {
                let mean: f64 = p.iter().zip(plan_rows.column(dir)).map(|(pi, f)| pi * f).sum();
                let dp: Vec<f64> = p
                    .iter()
                    .zip(plan_rows.column(dir))
                    .map(|(pi, f)| pi * (f - mean) / tau)
                    .collect();
                let col = weighted_rows(acc_rows.view(), &dp);
                jac.column_mut(j).assign(&ndarray::ArrayView1::from(&col));
            }
            Ok(FeatureSensitivity { expected_features: expected, jacobian: jac })
        }
        Environment::Grid(g) => {
            let n = g.successors.len();
            let mut dr = vec![0.0; n * nd];
            for s in 0..n {
                for (j, &dir) in directions.iter().enumerate() {
                    dr[s * nd + j] = plan_rows[[s, dir]];
                }
            }
            let solve = grid_soft_vi(&g.successors, &r, Some((&dr, nd)), config.iterations, tau);
            let dpi = if config.iterations == 0 {
                vec![0.0; solve.dq.len()]
            } else {
                policy_tangent(&solve.pi, &solve.dq, nd, tau)
            };
            let occ = grid_occupancy(&g.successors, env.start(), &solve.pi, Some((&dpi, nd)), config.horizon, false);
            let expected = weighted_rows(acc_rows.view(), &occ.total);
            for (s, row) in acc_rows.rows().into_iter().enumerate() {
                let dt = &occ.dtotal[s * nd..(s + 1) * nd];
                if dt.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for (m, &f) in row.iter().enumerate() {
                    for j in 0..nd {
                        jac[[m, j]] += f * dt[j];
                    }
                }
            }
            Ok(FeatureSensitivity { expected_features: expected, jacobian: jac })
        }
    }
}

/// Jacobian of expected feature counts (basis `kind`) with respect to every
/// planning weight.
pub fn feature_count_gradient(
    env: &Environment,
    weights: &[f64],
    config: &PlannerConfig,
    kind: SpaceKind,
) -> Result<Array2<f64>> {
    let all: Vec<usize> = (0..weights.len()).collect();
    Ok(feature_sensitivity(env, weights, config, kind, &all)?.jacobian)
}

fn sample_index(probs: impl IntoIterator<Item = f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// I.i.d. rollouts of the policy from the start state.
pub fn sample_trajectories(
    env: &Environment,
    policy: &SoftPolicy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    check_policy(env, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = match env {
        Environment::Flight(_) => horizon.min(1),
        Environment::Grid(_) => horizon,
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = env.start();
        let mut states = vec![s];
        let mut actions = Vec::with_capacity(steps);
        for _ in 0..steps {
            let a = sample_index(policy.action_probs.row(s).iter().copied(), &mut rng);
            s = env.successor(s, a)?;
            actions.push(a);
            states.push(s);
        }
        out.push(Trajectory { states, actions });
    }
    Ok(out)
}

/// Optimal deterministic finite-horizon plan (hard max, time-indexed values).
/// Ties go to the lowest action index.
pub fn greedy_trajectory(env: &Environment, weights: &[f64], horizon: usize) -> Result<Trajectory> {
    let kind = check_weights(env, weights)?;
    let r = rewards(env.feature_rows(kind).view(), weights);
    match env {
        Environment::Flight(_) => {
            if horizon == 0 {
                return Ok(Trajectory { states: vec![0], actions: vec![] });
            }
            let best = argmax(&r);
            Ok(Trajectory { states: vec![0, best + 1], actions: vec![best] })
        }
        Environment::Grid(g) => {
            let n = g.successors.len();
            let mut v = vec![0.0; n];
            let mut policy = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut act = vec![0u8; n];
                let mut next = vec![0.0; n];
                for s in 0..n {
                    let mut best = f64::NEG_INFINITY;
                    for (a, &t) in g.successors[s].iter().enumerate() {
                        let q = r[t] + v[t];
                        if q > best {
                            best = q;
                            act[s] = a as u8;
                        }
                    }
                    next[s] = best;
                }
                v = next;
                policy.push(act);
            }
            let mut s = env.start();
            let mut states = vec![s];
            let mut actions = Vec::with_capacity(horizon);
            for remaining in (0..horizon).rev() {
                let a = policy[remaining][s] as usize;
                s = g.successors[s][a];
                actions.push(a);
                states.push(s);
            }
            Ok(Trajectory { states, actions })
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Return of a trajectory under a reward whose basis is inferred from its
/// length.
pub fn trajectory_return(env: &Environment, traj: &Trajectory, weights: &[f64]) -> Result<f64> {
    let kind = planning_kind(env, weights)?;
    Ok(dot(&env.trajectory_features(traj, kind)?, weights))
}
