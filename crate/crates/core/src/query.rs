//! Query construction and selection by expected information gain.
//!
//! For a query with candidates `c` and posterior particles `n` with weights
//! `omega_n`, the designer's answer distribution is `p_n = softmax(beta *
//! u_n)` where `u_nc` is particle `n`'s expected utility for candidate `c`.
//! The information gain is
//!
//! ```text
//! MI = H[sum_n omega_n p_n] - sum_n omega_n H[p_n]
//! ```

use std::collections::{BTreeMap, HashSet};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{invalid, Error, Result};
use crate::inference::Posterior;
use crate::planning::{feature_sensitivity, plan_expected_features, PlannerConfig};
use crate::reward_space::{SpaceKind, WEIGHT_BOUND};

/// Information gain from a particle-by-candidate utility matrix.
pub fn mutual_information(utilities: ArrayView2<'_, f64>, weights: &[f64], beta: f64) -> f64 {
    let cols: Vec<usize> = (0..utilities.ncols()).collect();
    let mut scratch = MiScratch::default();
    mi_of_columns(utilities, &cols, weights, beta, &mut scratch)
}

#[derive(Default)]
struct MiScratch {
    mean: Vec<f64>,
    logp: Vec<f64>,
}

/// MI of the sub-query made of `cols`.
fn mi_of_columns(u: ArrayView2<'_, f64>, cols: &[usize], weights: &[f64], beta: f64, scratch: &mut MiScratch) -> f64 {
    let k = cols.len();
    if k <= 1 {
        return 0.0;
    }
    scratch.mean.clear();
    scratch.mean.resize(k, 0.0);
    scratch.logp.resize(k, 0.0);
    let mut cond = 0.0;
    for (row, &w) in u.rows().into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for (l, &c) in scratch.logp.iter_mut().zip(cols) {
            *l = beta * row[c];
            m = m.max(*l);
        }
        let z = m + scratch.logp.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let mut h = 0.0;
        for (l, acc) in scratch.logp.iter_mut().zip(scratch.mean.iter_mut()) {
            *l -= z;
            let p = l.exp();
            h -= p * *l;
            *acc += w * p;
        }
        cond += w * h;
    }
    let marginal: f64 = scratch.mean.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    marginal - cond
}

/// MI and its derivative with respect to every utility.
pub fn mutual_information_with_gradient(utilities: ArrayView2<'_, f64>, weights: &[f64], beta: f64) -> (f64, Array2<f64>) {
    let (n, k) = utilities.dim();
    let mut logp = Array2::zeros((n, k));
    let mut mean = vec![0.0; k];
    let mut cond = 0.0;
    for (i, (row, &w)) in utilities.rows().into_iter().zip(weights).enumerate() {
        let scaled: Vec<f64> = row.iter().map(|u| beta * u).collect();
        let z = crate::inference::log_sum_exp(&scaled);
        let mut h = 0.0;
        for c in 0..k {
            let l = scaled[c] - z;
            logp[[i, c]] = l;
            let p = l.exp();
            h -= p * l;
            mean[c] += w * p;
        }
        cond += w * h;
    }
    let log_mean: Vec<f64> = mean.iter().map(|p| p.ln()).collect();
    let marginal: f64 = mean.iter().zip(&log_mean).filter(|(p, _)| **p > 0.0).map(|(p, l)| -p * l).sum();
    // dMI/dp_nc = w_n (log p_nc - log pbar_c); chain through the softmax.
    let mut grad = Array2::zeros((n, k));
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let p: Vec<f64> = (0..k).map(|c| logp[[i, c]].exp()).collect();
        let g: Vec<f64> = (0..k).map(|c| w * (logp[[i, c]] - log_mean[c])).collect();
        let gp: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        for c in 0..k {
            grad[[i, c]] = beta * p[c] * (g[c] - gp);
        }
    }
    (marginal - cond, grad)
}

/// Leading `dim` columns: linear rewards read the linear block of expanded
/// feature expectations.
fn leading(expectations: ArrayView2<'_, f64>, dim: usize) -> Result<ArrayView2<'_, f64>> {
    if expectations.ncols() < dim {
        return Err(Error::DimensionMismatch { expected: dim, got: expectations.ncols() });
    }
    Ok(expectations.slice_move(s![.., ..dim]))
}

/// Expected information gain of a query given per-candidate expected
/// features.
pub fn expected_information_gain(expectations: ArrayView2<'_, f64>, particles: &Posterior, beta: f64) -> Result<f64> {
    if expectations.nrows() == 0 {
        return Err(Error::EmptyQuery);
    }
    let u = particles.utilities(leading(expectations, particles.dim())?)?;
    Ok(mutual_information(u.view(), &particles.probs(), beta))
}

/// Candidates drawn from a proxy pool, by pool index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteQuery {
    pub proxies: Vec<usize>,
}

impl DiscreteQuery {
    pub fn len(&self) -> usize {
        self.proxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.is_empty()
    }
}

fn check_pool(pool: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("query size must be at least 1"));
    }
    if pool < k {
        return Err(Error::PoolTooSmall { pool, query: k });
    }
    Ok(())
}

/// Pool utilities for every particle, `particles x pool`.
fn pool_utilities(particles: &Posterior, pool_expectations: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    particles.utilities(leading(pool_expectations, particles.dim())?)
}

/// Greedy growth: start from one uniformly drawn pool member, then
/// repeatedly add the member that maximizes the MI of the enlarged query
/// until it has `k` members. Ties go to the lowest pool index.
pub fn greedy_discrete_query(
    particles: &Posterior,
    pool_expectations: ArrayView2<'_, f64>,
    k: usize,
    beta: f64,
    seed: u64,
) -> Result<DiscreteQuery> {
    let pool = pool_expectations.nrows();
    check_pool(pool, k)?;
    let u = pool_utilities(particles, pool_expectations)?;
    let weights = particles.probs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..pool)];
    let mut scratch = MiScratch::default();
    let mut trial = Vec::with_capacity(k);
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for cand in 0..pool {
            if chosen.contains(&cand) {
                continue;
            }
            trial.clear();
            trial.extend_from_slice(&chosen);
            trial.push(cand);
            let mi = mi_of_columns(u.view(), &trial, &weights, beta, &mut scratch);
            if best.is_none_or(|(_, b)| mi > b) {
                best = Some((cand, mi));
            }
        }
        chosen.push(best.expect("pool larger than query").0);
    }
    Ok(DiscreteQuery { proxies: chosen })
}

fn draw_query(rng: &mut impl Rng, pool: usize, k: usize) -> Vec<usize> {
    let mut q = rand::seq::index::sample(rng, pool, k).into_vec();
    q.sort_unstable();
    q
}

/// `k` distinct pool members, uniformly at random, in ascending order.
pub fn random_discrete_query(pool: usize, k: usize, seed: u64) -> Result<DiscreteQuery> {
    check_pool(pool, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DiscreteQuery { proxies: draw_query(&mut rng, pool, k) })
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Advances `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Best of `n_trials` distinct random queries. When `n_trials` covers every
/// `k`-subset of the pool the search is exhaustive.
pub fn random_search_query(
    particles: &Posterior,
    pool_expectations: ArrayView2<'_, f64>,
    k: usize,
    n_trials: usize,
    beta: f64,
    seed: u64,
) -> Result<DiscreteQuery> {
    let pool = pool_expectations.nrows();
    check_pool(pool, k)?;
    if n_trials == 0 {
        return Err(invalid("random search needs at least one trial"));
    }
    let u = pool_utilities(particles, pool_expectations)?;
    let weights = particles.probs();
    let mut scratch = MiScratch::default();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |q: &[usize], best: &mut Option<(Vec<usize>, f64)>| {
        let mi = mi_of_columns(u.view(), q, &weights, beta, &mut scratch);
        if best.as_ref().is_none_or(|(_, b)| mi > *b) {
            *best = Some((q.to_vec(), mi));
        }
    };
    let total = binomial(pool, k);
    if total.is_some_and(|t| n_trials as u128 >= t) {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            consider(&combo, &mut best);
            if !next_combination(&mut combo, pool) {
                break;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(n_trials);
        while seen.len() < n_trials {
            let q = draw_query(&mut rng, pool, k);
            if seen.insert(q.clone()) {
                consider(&q, &mut best);
            }
        }
    }
    Ok(DiscreteQuery { proxies: best.expect("at least one trial").0 })
}

/// Evenly spaced values over `[-9, 9]`, endpoints included. A single value
/// sits at zero.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -WEIGHT_BOUND + 2.0 * WEIGHT_BOUND * i as f64 / (n - 1) as f64).collect(),
    }
}

/// A set of free feature weights the designer sets, with every other weight
/// fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQuery {
    pub n_features: usize,
    /// Ascending.
    pub free_indices: Vec<usize>,
    pub fixed_valuation: BTreeMap<usize, f64>,
    /// Discretization of each free weight, aligned with `free_indices`.
    pub grid: Vec<Vec<f64>>,
}

impl FeatureQuery {
    pub fn new(
        n_features: usize,
        free_indices: Vec<usize>,
        fixed_valuation: BTreeMap<usize, f64>,
        grid: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if free_indices.is_empty() {
            return Err(invalid("feature query needs at least one free feature"));
        }
        if free_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("free indices must be strictly ascending"));
        }
        if free_indices.last().is_some_and(|&i| i >= n_features) {
            return Err(invalid("free index out of range"));
        }
        if grid.len() != free_indices.len() || grid.iter().any(|g| g.is_empty()) {
            return Err(invalid("every free feature needs a nonempty grid"));
        }
        let expected: Vec<usize> = (0..n_features).filter(|i| !free_indices.contains(i)).collect();
        if fixed_valuation.keys().copied().collect::<Vec<_>>() != expected {
            return Err(invalid("fixed valuation must cover exactly the non-free features"));
        }
        if fixed_valuation.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fixed valuation"));
        }
        Ok(Self { n_features, free_indices, fixed_valuation, grid })
    }

    /// Free features on uniform grids, all fixed weights zero.
    pub fn with_zero_fixed(n_features: usize, free_indices: Vec<usize>, grid_size: usize) -> Result<Self> {
        let fixed = fixed_indices(n_features, &free_indices).into_iter().map(|i| (i, 0.0)).collect();
        let grid = vec![uniform_grid(grid_size); free_indices.len()];
        Self::new(n_features, free_indices, fixed, grid)
    }

    pub fn n_candidates(&self) -> usize {
        self.grid.iter().map(Vec::len).product()
    }

    fn base_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_features];
        for (&i, &v) in &self.fixed_valuation {
            w[i] = v;
        }
        w
    }

    /// Cartesian product of the free grids; the first free feature varies
    /// slowest.
    pub fn candidates(&self) -> Vec<Vec<f64>> {
        let base = self.base_weights();
        let mut out = vec![base];
        for (&idx, values) in self.free_indices.iter().zip(&self.grid) {
            out = out
                .into_iter()
                .flat_map(|w| {
                    values.iter().map(move |&v| {
                        let mut w = w.clone();
                        w[idx] = v;
                        w
                    })
                })
                .collect();
        }
        out
    }

    /// Candidate whose free weights are closest (Euclidean) to the given
    /// values.
    pub fn nearest_candidate(&self, free_values: &[f64]) -> Result<usize> {
        if free_values.len() != self.free_indices.len() {
            return Err(Error::DimensionMismatch { expected: self.free_indices.len(), got: free_values.len() });
        }
        if free_values.iter().any(|v| !v.is_finite() || v.abs() > WEIGHT_BOUND) {
            return Err(invalid(format!("free weights must lie in [-{WEIGHT_BOUND}, {WEIGHT_BOUND}]")));
        }
        let mut index = 0;
        for (values, &target) in self.grid.iter().zip(free_values) {
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if (v - target).abs() < (values[best] - target).abs() {
                    best = i;
                }
            }
            index = index * values.len() + best;
        }
        Ok(index)
    }
}

fn fixed_indices(n_features: usize, free: &[usize]) -> Vec<usize> {
    (0..n_features).filter(|i| !free.contains(i)).collect()
}

/// Training environment and planner used to evaluate feature-query
/// candidates, which are generally not in any cache.
#[derive(Debug, Clone, Copy)]
pub struct CandidatePlanner<'a> {
    pub env: &'a Environment,
    pub planner: PlannerConfig,
    /// Basis of the returned expectations.
    pub kind: SpaceKind,
}

impl CandidatePlanner<'_> {
    pub fn expectations(&self, candidates: &[Vec<f64>]) -> Result<Array2<f64>> {
        let m = self.kind.dim(self.env.n_features());
        let mut out = Array2::zeros((candidates.len(), m));
        for (row, w) in out.rows_mut().into_iter().zip(candidates) {
            let e = plan_expected_features(self.env, w, &self.planner, self.kind)?;
            row.into_iter().zip(e).for_each(|(dst, v)| *dst = v);
        }
        Ok(out)
    }
}

/// Candidate reward vectors of a feature query and their planned expected
/// features.
pub fn expand_feature_query(fq: &FeatureQuery, planner: &CandidatePlanner<'_>) -> Result<(Vec<Vec<f64>>, Array2<f64>)> {
    if fq.n_features != planner.env.n_features() {
        return Err(Error::DimensionMismatch { expected: planner.env.n_features(), got: fq.n_features });
    }
    let candidates = fq.candidates();
    let expectations = planner.expectations(&candidates)?;
    Ok((candidates, expectations))
}

pub fn feature_query_mi(fq: &FeatureQuery, particles: &Posterior, planner: &CandidatePlanner<'_>, beta: f64) -> Result<f64> {
    let (_, e) = expand_feature_query(fq, planner)?;
    expected_information_gain(e.view(), particles, beta)
}

/// MI of a feature query and its gradient with respect to the fixed weights
/// (ordered as `fixed_valuation`'s keys), by the chain rule through the
/// planner's forward-mode sensitivities.
pub fn feature_query_mi_gradient(
    fq: &FeatureQuery,
    particles: &Posterior,
    planner: &CandidatePlanner<'_>,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let fixed: Vec<usize> = fq.fixed_valuation.keys().copied().collect();
    let candidates = fq.candidates();
    let m = particles.dim();
    let mut means = Array2::zeros((candidates.len(), m));
    let mut jacobians = Vec::with_capacity(candidates.len());
    for (c, w) in candidates.iter().enumerate() {
        let sens = feature_sensitivity(planner.env, w, &planner.planner, planner.kind, &fixed)?;
        if sens.expected_features.len() < m {
            return Err(Error::DimensionMismatch { expected: m, got: sens.expected_features.len() });
        }
        for j in 0..m {
            means[[c, j]] = sens.expected_features[j];
        }
        jacobians.push(sens.jacobian);
    }
    let u = particles.utilities(means.view())?;
    let (mi, du) = mutual_information_with_gradient(u.view(), &particles.probs(), beta);
    // dMI/dmu_c = sum_n dMI/du_nc theta_n
    let dmu = du.t().dot(&particles.space().weights);
    let mut grad = vec![0.0; fixed.len()];
    for (c, jac) in jacobians.iter().enumerate() {
        for j in 0..m {
            let g = dmu[[c, j]];
            if g == 0.0 {
                continue;
            }
            for (out, &d) in grad.iter_mut().zip(jac.row(j)) {
                *out += g * d;
            }
        }
    }
    Ok((mi, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum GradientMethod {
    /// Differentiate through the planner.
    Analytic,
    /// Central differences, for planners without derivatives.
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureQuerySettings {
    /// Values per free weight for 1, 2, 3, ... free features; the last entry
    /// applies to larger queries.
    pub grid_sizes: Vec<usize>,
    pub random_inits: usize,
    pub gradient_steps: usize,
    pub learning_rate: f64,
    /// Standard deviation of the random-search initializations.
    pub init_std: f64,
    pub gradient: GradientMethod,
}

impl Default for FeatureQuerySettings {
    fn default() -> Self {
        Self {
            grid_sizes: vec![9, 5, 3],
            random_inits: 20,
            gradient_steps: 20,
            learning_rate: 20.0,
            init_std: 1.0,
            gradient: GradientMethod::Analytic,
        }
    }
}

impl FeatureQuerySettings {
    pub fn grid_size(&self, n_free: usize) -> usize {
        let i = n_free.saturating_sub(1).min(self.grid_sizes.len().saturating_sub(1));
        self.grid_sizes.get(i).copied().unwrap_or(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedValuation {
    pub valuation: BTreeMap<usize, f64>,
    pub mi: f64,
    pub diagnostics: Vec<String>,
}

fn with_valuation(template: &FeatureQuery, values: &[f64]) -> FeatureQuery {
    let mut fq = template.clone();
    for (v, new) in fq.fixed_valuation.values_mut().zip(values) {
        *v = *new;
    }
    fq
}

fn mi_gradient(
    fq: &FeatureQuery,
    particles: &Posterior,
    planner: &CandidatePlanner<'_>,
    beta: f64,
    method: GradientMethod,
) -> Result<(f64, Vec<f64>)> {
    match method {
        GradientMethod::Analytic => feature_query_mi_gradient(fq, particles, planner, beta),
        GradientMethod::FiniteDifference { step } => {
            let mi = feature_query_mi(fq, particles, planner, beta)?;
            let values: Vec<f64> = fq.fixed_valuation.values().copied().collect();
            let mut grad = Vec::with_capacity(values.len());
            for j in 0..values.len() {
                let mut hi = values.clone();
                hi[j] += step;
                let mut lo = values.clone();
                lo[j] -= step;
                let f_hi = feature_query_mi(&with_valuation(fq, &hi), particles, planner, beta)?;
                let f_lo = feature_query_mi(&with_valuation(fq, &lo), particles, planner, beta)?;
                grad.push((f_hi - f_lo) / (2.0 * step));
            }
            Ok((mi, grad))
        }
    }
}

/// Chooses the fixed weights of a feature query: best of a few normal
/// random draws, refined by projected gradient ascent on MI. The best iterate
/// seen is returned, so the result never scores below the best draw.
pub fn optimize_fixed_weights(
    free_indices: &[usize],
    grid: &[Vec<f64>],
    particles: &Posterior,
    planner: &CandidatePlanner<'_>,
    beta: f64,
    settings: &FeatureQuerySettings,
    rng: &mut impl Rng,
) -> Result<OptimizedValuation> {
    if free_indices.is_empty() {
        return Err(invalid("need at least one free feature"));
    }
    let d = planner.env.n_features();
    let fixed = fixed_indices(d, free_indices);
    let zero: BTreeMap<usize, f64> = fixed.iter().map(|&i| (i, 0.0)).collect();
    let template = FeatureQuery::new(d, free_indices.to_vec(), zero, grid.to_vec())?;
    let mut diagnostics = Vec::new();
    if fixed.is_empty() {
        let mi = feature_query_mi(&template, particles, planner, beta)?;
        return Ok(OptimizedValuation { valuation: BTreeMap::new(), mi, diagnostics });
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..settings.random_inits.max(1) {
        let v: Vec<f64> = (0..fixed.len())
            .map(|_| (settings.init_std * rng.sample::<f64, _>(StandardNormal)).clamp(-WEIGHT_BOUND, WEIGHT_BOUND))
            .collect();
        let mi = feature_query_mi(&with_valuation(&template, &v), particles, planner, beta)?;
        if best.as_ref().is_none_or(|(_, b)| mi > *b) {
            best = Some((v, mi));
        }
    }
    let (mut v, _) = best.clone().expect("at least one initialization");
    for step in 0..=settings.gradient_steps {
        let fq = with_valuation(&template, &v);
        let (mi, grad) = if step == settings.gradient_steps {
            (feature_query_mi(&fq, particles, planner, beta)?, Vec::new())
        } else {
            mi_gradient(&fq, particles, planner, beta, settings.gradient)?
        };
        if mi > best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1) {
            best = Some((v.clone(), mi));
        }
        if step == settings.gradient_steps {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            diagnostics.push(format!("non-finite MI gradient at step {step}; keeping best point so far"));
            break;
        }
        for (x, g) in v.iter_mut().zip(&grad) {
            *x = (*x + settings.learning_rate * g).clamp(-WEIGHT_BOUND, WEIGHT_BOUND);
        }
    }
    let (values, mi) = best.expect("evaluated");
    Ok(OptimizedValuation { valuation: fixed.into_iter().zip(values).collect(), mi, diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixedWeights {
    /// Fixed weights are zero.
    #[default]
    Zeros,
    /// Fixed weights are optimized for information gain.
    Optimized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQuerySelection {
    pub query: FeatureQuery,
    pub mi: f64,
    pub diagnostics: Vec<String>,
}

/// Greedily grows the set of free features. Each trial set is scored by the
/// MI of its query, with fixed weights zero or optimized. Ties go to the
/// lowest feature index.
pub fn greedy_feature_query(
    particles: &Posterior,
    planner: &CandidatePlanner<'_>,
    k: usize,
    mode: FixedWeights,
    beta: f64,
    settings: &FeatureQuerySettings,
    seed: u64,
) -> Result<FeatureQuerySelection> {
    let d = planner.env.n_features();
    if k == 0 || k > d {
        return Err(invalid(format!("free feature count {k} outside 1..={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = vec![uniform_grid(settings.grid_size(k)); k];
    let mut free: Vec<usize> = Vec::with_capacity(k);
    let mut winner: Option<FeatureQuerySelection> = None;
    for round in 0..k {
        let grid = &grid[..round + 1];
        let mut best: Option<FeatureQuerySelection> = None;
        for f in 0..d {
            if free.contains(&f) {
                continue;
            }
            let mut trial = free.clone();
            trial.push(f);
            trial.sort_unstable();
            let (query, mi, diagnostics) = match mode {
                FixedWeights::Zeros => {
                    let fixed = fixed_indices(d, &trial).into_iter().map(|i| (i, 0.0)).collect();
                    let q = FeatureQuery::new(d, trial, fixed, grid.to_vec())?;
                    let mi = feature_query_mi(&q, particles, planner, beta)?;
                    (q, mi, Vec::new())
                }
                FixedWeights::Optimized => {
                    let opt = optimize_fixed_weights(&trial, grid, particles, planner, beta, settings, &mut rng)?;
                    let q = FeatureQuery::new(d, trial, opt.valuation, grid.to_vec())?;
                    (q, opt.mi, opt.diagnostics)
                }
            };
            if best.as_ref().is_none_or(|b| mi > b.mi) {
                best = Some(FeatureQuerySelection { query, mi, diagnostics });
            }
        }
        let b = best.expect("a feature remains");
        free = b.query.free_indices.clone();
        winner = Some(b);
    }
    // In optimized mode the winning trial of the last round already carries
    // the optimized valuation for the final free set.
    Ok(winner.expect("k >= 1"))
}

/// Uniformly random free features with zero fixed weights.
pub fn random_feature_query(n_features: usize, k: usize, settings: &FeatureQuerySettings, seed: u64) -> Result<FeatureQuery> {
    if k == 0 || k > n_features {
        return Err(invalid(format!("free feature count {k} outside 1..={n_features}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = draw_query(&mut rng, n_features, k);
    FeatureQuery::with_zero_fixed(n_features, free, settings.grid_size(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_space::{sample_true_space, RewardSpace};
    use ndarray::array;
    use std::sync::Arc;

    fn posterior(rows: Array2<f64>) -> Posterior {
        let d = rows.ncols();
        Posterior::uniform(Arc::new(RewardSpace::new(SpaceKind::Linear, d, rows).unwrap()))
    }

    #[test]
    fn single_candidate_has_zero_mi() {
        let p = posterior(array![[1.0, 2.0], [-3.0, 0.5]]);
        assert_eq!(expected_information_gain(array![[1.0, 1.0]].view(), &p, 0.5).unwrap(), 0.0);
        let same = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        assert!(expected_information_gain(same.view(), &p, 0.5).unwrap().abs() < 1e-15);
        assert!(expected_information_gain(Array2::zeros((0, 2)).view(), &p, 0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_on_utilities() {
        let u = array![[1.0, -0.5, 2.0], [0.3, 0.8, -1.2], [2.0, 2.0, 0.0]];
        let w = [0.2, 0.5, 0.3];
        let (mi, g) = mutual_information_with_gradient(u.view(), &w, 0.7);
        assert!((mi - mutual_information(u.view(), &w, 0.7)).abs() < 1e-14);
        let h = 1e-6;
        for i in 0..3 {
            for c in 0..3 {
                let mut up = u.clone();
                up[[i, c]] += h;
                let mut dn = u.clone();
                dn[[i, c]] -= h;
                let fd = (mutual_information(up.view(), &w, 0.7) - mutual_information(dn.view(), &w, 0.7)) / (2.0 * h);
                assert!((fd - g[[i, c]]).abs() < 1e-8, "{fd} {}", g[[i, c]]);
            }
        }
    }

    #[test]
    fn random_query_basics() {
        assert_eq!(random_discrete_query(6, 6, 1).unwrap().proxies, (0..6).collect::<Vec<_>>());
        assert_eq!(random_discrete_query(50, 5, 3).unwrap(), random_discrete_query(50, 5, 3).unwrap());
        assert!(matches!(random_discrete_query(3, 4, 0), Err(Error::PoolTooSmall { .. })));
    }

    #[test]
    fn random_pair_frequencies() {
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for seed in 0..draws {
            *counts.entry(random_discrete_query(10, 2, seed).unwrap().proxies).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 45);
        let p = 1.0 / 45.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in counts.values() {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma + 1.0, "{c}");
        }
    }

    #[test]
    fn random_search_single_trial_is_random_query() {
        let space = sample_true_space(1, 30, 3, -9.0, 9.0, SpaceKind::Linear).unwrap();
        let p = Posterior::uniform(Arc::new(space));
        let pool = sample_true_space(2, 40, 3, -3.0, 3.0, SpaceKind::Linear).unwrap().weights;
        let a = random_search_query(&p, pool.view(), 3, 1, 0.5, 17).unwrap();
        assert_eq!(a, random_discrete_query(40, 3, 17).unwrap());
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut c = vec![0, 1, 2];
        let mut n = 1;
        while next_combination(&mut c, 8) {
            n += 1;
        }
        assert_eq!(n, 56);
        assert_eq!(binomial(8, 3), Some(56));
    }

    #[test]
    fn greedy_handles_point_mass() {
        let p = posterior(array![[1.0, 2.0]]);
        let pool = sample_true_space(2, 10, 2, -3.0, 3.0, SpaceKind::Linear).unwrap().weights;
        let q = greedy_discrete_query(&p, pool.view(), 4, 0.5, 0).unwrap();
        assert_eq!(q.len(), 4);
        let mut sorted = q.proxies.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert!(greedy_discrete_query(&p, pool.view(), 11, 0.5, 0).is_err());
    }

    #[test]
    fn feature_query_candidates() {
        let q = FeatureQuery::with_zero_fixed(4, vec![2], 9).unwrap();
        assert_eq!(q.n_candidates(), 9);
        let c = q.candidates();
        assert_eq!(c.len(), 9);
        assert_eq!(c[0], vec![0.0, 0.0, -9.0, 0.0]);
        assert_eq!(c[8], vec![0.0, 0.0, 9.0, 0.0]);
        let q3 = FeatureQuery::with_zero_fixed(4, vec![0, 1, 3], 3).unwrap();
        assert_eq!(q3.candidates().len(), 27);
        assert_eq!(q3.candidates()[5], vec![-9.0, 0.0, 0.0, 9.0]);
        assert_eq!(q3.nearest_candidate(&[-8.0, 1.0, 7.0]).unwrap(), 5);
        assert!(q3.nearest_candidate(&[10.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn feature_query_validation() {
        let grid = vec![uniform_grid(3)];
        assert!(FeatureQuery::new(3, vec![1], BTreeMap::from([(0, 1.0)]), grid.clone()).is_err());
        assert!(FeatureQuery::new(3, vec![1], BTreeMap::from([(0, 1.0), (2, 0.0)]), grid.clone()).is_ok());
        assert!(FeatureQuery::new(3, vec![], BTreeMap::new(), vec![]).is_err());
        assert!(FeatureQuery::new(3, vec![3], BTreeMap::from([(0, 1.0), (1, 0.0), (2, 0.0)]), grid).is_err());
    }

    #[test]
    fn uniform_grid_values() {
        assert_eq!(uniform_grid(3), vec![-9.0, 0.0, 9.0]);
        assert_eq!(uniform_grid(9)[1], -6.75);
        assert_eq!(uniform_grid(1), vec![0.0]);
        let s = FeatureQuerySettings::default();
        assert_eq!((s.grid_size(1), s.grid_size(2), s.grid_size(3), s.grid_size(5)), (9, 5, 3, 3));
    }
}
