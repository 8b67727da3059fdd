//! Reward vectors, finite true-reward spaces, proxy pools and the per-proxy
//! feature-expectation cache.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{check_dim, invalid, Result};
use crate::planning::{self, PlannerConfig};

/// Bound on every sampled reward weight.
pub const WEIGHT_BOUND: f64 = 9.0;

/// Whether a reward acts on the base features or on their quadratic
/// expansion. Also used to select the feature basis when planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    #[default]
    Linear,
    Quadratic,
}

impl SpaceKind {
    /// Length of a reward vector of this kind over `base_dim` features.
    pub fn dim(self, base_dim: usize) -> usize {
        match self {
            SpaceKind::Linear => base_dim,
            SpaceKind::Quadratic => expanded_dim(base_dim),
        }
    }
}

/// `d + d(d+1)/2`
pub fn expanded_dim(base_dim: usize) -> usize {
    base_dim + base_dim * (base_dim + 1) / 2
}

/// Appends all pairwise products `x_i * x_j` (`i <= j`, lexicographic) to the
/// base features.
pub fn quadratic_expand(base: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(expanded_dim(base.len()));
    quadratic_expand_into(base, &mut out);
    out
}

pub(crate) fn quadratic_expand_into(base: &[f64], out: &mut Vec<f64>) {
    out.extend_from_slice(base);
    for i in 0..base.len() {
        for j in i..base.len() {
            out.push(base[i] * base[j]);
        }
    }
}

/// Expands every row of a feature matrix.
pub fn quadratic_expand_rows(rows: &Array2<f64>) -> Array2<f64> {
    let (n, d) = rows.dim();
    let m = expanded_dim(d);
    let mut flat = Vec::with_capacity(n * m);
    for row in rows.rows() {
        let row = row.to_vec();
        quadratic_expand_into(&row, &mut flat);
    }
    Array2::from_shape_vec((n, m), flat).expect("expanded shape")
}

/// A (proxy or true) reward function identified by its weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub weights: Vec<f64>,
    pub kind: SpaceKind,
}

impl RewardVector {
    pub fn linear(weights: Vec<f64>) -> Self {
        Self { weights, kind: SpaceKind::Linear }
    }

    pub fn quadratic(weights: Vec<f64>) -> Self {
        Self { weights, kind: SpaceKind::Quadratic }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Places a linear reward on the linear block of the quadratic space.
    /// Interaction weights are zero, so the reward is unchanged.
    pub fn to_quadratic(&self) -> RewardVector {
        match self.kind {
            SpaceKind::Quadratic => self.clone(),
            SpaceKind::Linear => {
                let mut w = self.weights.clone();
                w.resize(expanded_dim(self.weights.len()), 0.0);
                RewardVector::quadratic(w)
            }
        }
    }

    pub fn dot(&self, features: &[f64]) -> Result<f64> {
        check_dim(self.weights.len(), features.len())?;
        Ok(dot(&self.weights, features))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A finite sample of candidate true rewards, stored row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpace {
    pub kind: SpaceKind,
    pub base_dim: usize,
    pub weights: Array2<f64>,
}

impl RewardSpace {
    pub fn new(kind: SpaceKind, base_dim: usize, weights: Array2<f64>) -> Result<Self> {
        check_dim(kind.dim(base_dim), weights.ncols())?;
        if weights.nrows() == 0 {
            return Err(invalid("reward space must not be empty"));
        }
        Ok(Self { kind, base_dim, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    /// Length of each candidate vector.
    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn member(&self, index: usize) -> RewardVector {
        RewardVector { weights: self.weights.row(index).to_vec(), kind: self.kind }
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.weights.row(index)
    }

    pub fn into_shared(self) -> Arc<Self> {
        Arc::new(self)
    }
}

fn uniform_matrix(seed: u64, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..=hi)).collect();
    Array2::from_shape_vec((rows, cols), flat).expect("uniform shape")
}

/// Samples `size` i.i.d. uniform reward vectors in `[lo, hi]^dim`, where `dim`
/// is the expanded length for the quadratic kind.
pub fn sample_true_space(
    seed: u64,
    size: usize,
    base_dim: usize,
    lo: f64,
    hi: f64,
    kind: SpaceKind,
) -> Result<RewardSpace> {
    if size == 0 {
        return Err(invalid("true space size must be at least 1"));
    }
    if base_dim == 0 {
        return Err(invalid("feature dimension must be at least 1"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid(format!("empty weight range [{lo}, {hi}]")));
    }
    let weights = uniform_matrix(seed, size, kind.dim(base_dim), lo, hi);
    RewardSpace::new(kind, base_dim, weights)
}

/// Uniform sample of linear proxy rewards that discrete queries draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyPool {
    pub members: Array2<f64>,
    pub seed: u64,
}

impl ProxyPool {
    pub fn len(&self) -> usize {
        self.members.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.members.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, index: usize) -> RewardVector {
        RewardVector::linear(self.members.row(index).to_vec())
    }
}

pub fn sample_proxy_pool(seed: u64, size: usize, dim: usize) -> Result<ProxyPool> {
    let space = sample_true_space(seed, size, dim, -WEIGHT_BOUND, WEIGHT_BOUND, SpaceKind::Linear)?;
    Ok(ProxyPool { members: space.weights, seed })
}

/// How the cache estimates each proxy's expected trajectory features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CacheMode {
    /// Exact occupancy propagation.
    #[default]
    Exact,
    /// Mean over sampled rollouts; the rollouts are kept.
    Sampled { n: usize, seed: u64 },
}

/// Identifies the inputs a cache was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub env_seed: u64,
    pub pool_seed: u64,
    pub planner_hash: u64,
    pub kind: SpaceKind,
}

/// Expected (possibly expanded) trajectory features for every proxy in a pool.
/// Row `i` belongs to pool member `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExpectationCache {
    pub key: CacheKey,
    pub expectations: Array2<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<crate::environments::Trajectory>>>,
}

impl FeatureExpectationCache {
    pub fn len(&self) -> usize {
        self.expectations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.expectations.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.expectations.ncols()
    }

    pub fn get(&self, proxy: usize) -> Option<ArrayView1<'_, f64>> {
        (proxy < self.len()).then(|| self.expectations.row(proxy))
    }

    /// Rows for the given proxies, in order.
    pub fn select(&self, proxies: &[usize]) -> Array2<f64> {
        self.expectations.select(Axis(0), proxies)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

/// Plans every proxy once in the training environment and stores its
/// expected features in the basis of `kind`.
pub fn build_cache(
    env: &Environment,
    pool: &ProxyPool,
    planner: &PlannerConfig,
    kind: SpaceKind,
    mode: CacheMode,
) -> Result<FeatureExpectationCache> {
    if pool.is_empty() {
        return Err(invalid("proxy pool is empty"));
    }
    check_dim(env.n_features(), pool.dim())?;
    let m = kind.dim(env.n_features());
    let mut expectations = Array2::zeros((pool.len(), m));
    let mut samples = match mode {
        CacheMode::Exact => None,
        CacheMode::Sampled { .. } => Some(Vec::with_capacity(pool.len())),
    };
    for (i, proxy) in pool.members.rows().into_iter().enumerate() {
        let weights = proxy.to_vec();
        let policy = planning::soft_value_iteration(env, &weights, planner.iterations, planner.temperature)?;
        match mode {
            CacheMode::Exact => {
                let occ = planning::expected_feature_counts(env, &policy, planner.horizon, kind)?;
                expectations.row_mut(i).assign(&ArrayView1::from(&occ.expected_features));
            }
            CacheMode::Sampled { n, seed } => {
                let trajs = planning::sample_trajectories(
                    env,
                    &policy,
                    n,
                    planner.horizon,
                    seed.wrapping_add(i as u64),
                )?;
                let mut mean = vec![0.0; m];
                for t in &trajs {
                    for (acc, v) in mean.iter_mut().zip(env.trajectory_features(t, kind)?) {
                        *acc += v;
                    }
                }
                for (dst, v) in expectations.row_mut(i).iter_mut().zip(mean) {
                    *dst = v / n as f64;
                }
                if let Some(s) = samples.as_mut() {
                    s.push(trajs);
                }
            }
        }
    }
    Ok(FeatureExpectationCache {
        key: CacheKey {
            env_seed: env.seed(),
            pool_seed: pool.seed,
            planner_hash: planner.fingerprint(),
            kind,
        },
        expectations,
        samples,
    })
}
