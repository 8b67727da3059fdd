//! Simulated designers, test-environment regret and the query/answer loop.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::{generate_flight_env, generate_grid_env, Environment};
use crate::error::{invalid, Error, Result};
use crate::inference::{answer_log_probs, Posterior};
use crate::planning::{greedy_trajectory, trajectory_return, PlannerConfig};
use crate::query::{
    expand_feature_query, greedy_discrete_query, greedy_feature_query, random_discrete_query,
    random_feature_query, random_search_query, CandidatePlanner, DiscreteQuery, FeatureQuery,
    FeatureQuerySettings, FixedWeights,
};
use crate::reward_space::{
    build_cache, dot, sample_true_space, CacheMode, FeatureExpectationCache, ProxyPool, RewardSpace,
    RewardVector, SpaceKind, WEIGHT_BOUND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Flight,
    #[default]
    Chilly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    #[default]
    Discrete,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Greedy information-gain maximization.
    #[default]
    Greedy,
    /// Uniformly random query.
    Random,
    /// Best of many random discrete queries.
    RandomSearch,
    /// The whole pool every round, i.e. repeated plain IRD.
    FullIrd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub domain: Domain,
    /// Chilly World side length.
    pub grid_size: usize,
    pub wall_prob: f64,
    pub n_flights: usize,
    /// Base features: objects in Chilly World, per-flight features otherwise.
    pub n_features: usize,
    pub true_space_size: usize,
    /// Space the designer's true reward comes from.
    pub true_space_kind: SpaceKind,
    /// Space inference runs over; defaults to `true_space_kind`.
    pub inference_space_kind: Option<SpaceKind>,
    pub pool_size: usize,
    /// Use the (linear) true space itself as the proxy pool.
    pub pool_is_true_space: bool,
    pub query_type: QueryType,
    pub selection: Selection,
    pub fixed_weights: FixedWeights,
    /// Candidates per discrete query, or free features per feature query.
    pub query_size: usize,
    pub n_queries: usize,
    pub n_test_envs: usize,
    /// Rationality assumed by inference.
    pub beta: f64,
    /// Rationality of the simulated designer.
    pub designer_beta: f64,
    pub planner: PlannerConfig,
    /// Posterior particles for information-gain estimates.
    pub mi_samples: usize,
    pub random_search_trials: usize,
    pub feature: FeatureQuerySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: Domain::Chilly,
            grid_size: 10,
            wall_prob: 0.3,
            n_flights: 100,
            n_features: 20,
            true_space_size: 1_000_000,
            true_space_kind: SpaceKind::Linear,
            inference_space_kind: None,
            pool_size: 100,
            pool_is_true_space: false,
            query_type: QueryType::Discrete,
            selection: Selection::Greedy,
            fixed_weights: FixedWeights::Zeros,
            query_size: 5,
            n_queries: 20,
            n_test_envs: 100,
            beta: 0.5,
            designer_beta: 0.5,
            planner: PlannerConfig::default(),
            mi_samples: 5000,
            random_search_trials: 10_000,
            feature: FeatureQuerySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn inference_kind(&self) -> SpaceKind {
        self.inference_space_kind.unwrap_or(self.true_space_kind)
    }

    /// Basis for cached and planned expectations: wide enough for both the
    /// designer and inference.
    pub fn expectation_kind(&self) -> SpaceKind {
        if self.inference_kind() == SpaceKind::Quadratic || self.true_space_kind == SpaceKind::Quadratic {
            SpaceKind::Quadratic
        } else {
            SpaceKind::Linear
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("true_space_size", self.true_space_size),
            ("query_size", self.query_size),
            ("n_test_envs", self.n_test_envs),
            ("mi_samples", self.mi_samples),
            ("random_search_trials", self.random_search_trials),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        match self.domain {
            Domain::Chilly => {
                if self.grid_size == 0 || self.n_features > self.grid_size * self.grid_size {
                    return Err(invalid("n_features objects must fit on the grid"));
                }
                if !(0.0..1.0).contains(&self.wall_prob) {
                    return Err(invalid("wall_prob must lie in [0, 1)"));
                }
            }
            Domain::Flight => {
                if self.n_flights == 0 {
                    return Err(invalid("n_flights must be positive"));
                }
            }
        }
        for (name, b) in [("beta", self.beta), ("designer_beta", self.designer_beta)] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(invalid(format!("{name} must be a nonnegative number")));
            }
        }
        if !(self.planner.temperature > 0.0) {
            return Err(invalid("planner temperature must be positive"));
        }
        match self.query_type {
            QueryType::Discrete => {
                let pool = if self.pool_is_true_space { self.true_space_size } else { self.pool_size };
                if pool == 0 {
                    return Err(invalid("pool_size must be positive"));
                }
                if self.selection != Selection::FullIrd && self.query_size > pool {
                    return Err(Error::PoolTooSmall { pool, query: self.query_size });
                }
                if self.pool_is_true_space && self.inference_kind() != SpaceKind::Linear {
                    return Err(invalid("the true space can only serve as proxy pool when it is linear"));
                }
            }
            QueryType::Feature => {
                if self.query_size > self.n_features {
                    return Err(invalid("query_size exceeds the number of features"));
                }
                if matches!(self.selection, Selection::RandomSearch | Selection::FullIrd) {
                    return Err(invalid("feature queries support greedy or random selection"));
                }
            }
        }
        Ok(())
    }
}

/// Independent seeds for every random component of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    pub env: u64,
    pub true_space: u64,
    pub pool: u64,
    pub designer: u64,
    pub answers: u64,
    pub queries: u64,
    pub test_envs: u64,
}

impl SeedBundle {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            env: rng.next_u64(),
            true_space: rng.next_u64(),
            pool: rng.next_u64(),
            designer: rng.next_u64(),
            answers: rng.next_u64(),
            queries: rng.next_u64(),
            test_envs: rng.next_u64(),
        }
    }
}

fn leading(expectations: ArrayView2<'_, f64>, dim: usize) -> Result<ArrayView2<'_, f64>> {
    if expectations.ncols() < dim {
        return Err(Error::DimensionMismatch { expected: dim, got: expectations.ncols() });
    }
    Ok(expectations.slice_move(s![.., ..dim]))
}

/// Answers queries by sampling the IRD observation model under a known true
/// reward.
#[derive(Debug, Clone)]
pub struct SimulatedDesigner {
    pub true_reward: RewardVector,
    pub beta: f64,
    rng: ChaCha8Rng,
}

impl SimulatedDesigner {
    pub fn new(true_reward: RewardVector, beta: f64, seed: u64) -> Self {
        Self { true_reward, beta, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Probability of each answer. Expectations may be in a wider basis
    /// than the reward; the leading block is used.
    pub fn answer_probs(&self, expectations: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if expectations.nrows() == 0 {
            return Err(Error::EmptyQuery);
        }
        let e = leading(expectations, self.true_reward.dim())?;
        let u: Vec<f64> = e.rows().into_iter().map(|r| dot(&r.to_vec(), &self.true_reward.weights)).collect();
        Ok(answer_log_probs(&u, self.beta).into_iter().map(f64::exp).collect())
    }

    pub fn answer(&mut self, expectations: ArrayView2<'_, f64>) -> Result<usize> {
        let probs = self.answer_probs(expectations)?;
        let x: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last = i;
            }
            acc += p;
            if x < acc {
                return Ok(i);
            }
        }
        Ok(last)
    }
}

pub fn simulated_answer(designer: &mut SimulatedDesigner, expectations: ArrayView2<'_, f64>) -> Result<usize> {
    designer.answer(expectations)
}

/// Unseen environments with the true reward's optimal returns precomputed.
#[derive(Debug, Clone)]
pub struct TestSuite {
    envs: Vec<Environment>,
    true_reward: Vec<f64>,
    optimal: Vec<f64>,
    horizon: usize,
}

impl TestSuite {
    pub fn new(envs: Vec<Environment>, true_reward: &[f64], horizon: usize) -> Result<Self> {
        if envs.is_empty() {
            return Err(invalid("need at least one test environment"));
        }
        let optimal = envs
            .iter()
            .map(|env| {
                let path = greedy_trajectory(env, true_reward, horizon)?;
                trajectory_return(env, &path, true_reward)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { envs, true_reward: true_reward.to_vec(), optimal, horizon })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Environment] {
        &self.envs
    }

    /// Mean over environments of the true return lost by acting greedily on
    /// `reward` instead of the true reward.
    pub fn regret(&self, reward: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (env, best) in self.envs.iter().zip(&self.optimal) {
            let path = greedy_trajectory(env, reward, self.horizon)?;
            total += best - trajectory_return(env, &path, &self.true_reward)?;
        }
        Ok(total / self.envs.len() as f64)
    }
}

/// Mean regret of planning with `mean_reward` on the test environments.
pub fn test_regret(mean_reward: &[f64], true_reward: &[f64], test_envs: &[Environment], planner: &PlannerConfig) -> Result<f64> {
    TestSuite::new(test_envs.to_vec(), true_reward, planner.horizon)?.regret(mean_reward)
}

pub fn generate_env(config: &ExperimentConfig, seed: u64) -> Result<Environment> {
    Ok(match config.domain {
        Domain::Flight => generate_flight_env(seed, config.n_flights, config.n_features)?.into(),
        Domain::Chilly => generate_grid_env(seed, config.grid_size, config.n_features, config.wall_prob)?.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub regret: f64,
    pub entropy: f64,
    pub seconds: f64,
}

/// Regret and entropy after each answered query; step 0 is the prior.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub steps: Vec<StepMetrics>,
}

impl MetricsRecord {
    pub fn cumulative_regret(&self) -> f64 {
        self.steps.iter().skip(1).map(|s| s.regret).sum()
    }

    pub fn final_step(&self) -> Option<&StepMetrics> {
        self.steps.last()
    }

    /// `step,regret,entropy`; floats use the shortest round-trip form, so
    /// identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,regret,entropy\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{}", s.step, s.regret, s.entropy);
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("step,seconds\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{}", s.step, s.seconds);
        }
        out
    }
}

/// Sum of the regrets after each query (the prior step is excluded).
pub fn cumulative_regret(metrics: &MetricsRecord) -> Result<f64> {
    if metrics.steps.is_empty() {
        return Err(invalid("metrics are empty"));
    }
    Ok(metrics.cumulative_regret())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub n_queries: usize,
    pub cumulative_regret: f64,
    pub final_regret: f64,
    pub final_entropy: f64,
}

impl ExperimentSummary {
    pub fn new(config: &ExperimentConfig, metrics: &MetricsRecord) -> Self {
        let last = metrics.final_step();
        Self {
            config: config.clone(),
            n_queries: metrics.steps.len().saturating_sub(1),
            cumulative_regret: metrics.cumulative_regret(),
            final_regret: last.map_or(f64::NAN, |s| s.regret),
            final_entropy: last.map_or(f64::NAN, |s| s.entropy),
        }
    }
}

/// Mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStep {
    pub step: usize,
    pub n: usize,
    pub regret_mean: f64,
    pub regret_sem: f64,
    pub entropy_mean: f64,
    pub entropy_sem: f64,
}

/// Per-step mean and standard error across runs.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateStep> {
    let steps = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    (0..steps)
        .map(|i| {
            let regrets: Vec<f64> = records.iter().filter_map(|r| r.steps.get(i)).map(|s| s.regret).collect();
            let entropies: Vec<f64> = records.iter().filter_map(|r| r.steps.get(i)).map(|s| s.entropy).collect();
            let (regret_mean, regret_sem) = mean_sem(&regrets);
            let (entropy_mean, entropy_sem) = mean_sem(&entropies);
            AggregateStep { step: i, n: regrets.len(), regret_mean, regret_sem, entropy_mean, entropy_sem }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateStep]) -> String {
    let mut out = String::from("step,n,regret_mean,regret_sem,entropy_mean,entropy_sem\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.n, r.regret_mean, r.regret_sem, r.entropy_mean, r.entropy_sem);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    Discrete(DiscreteQuery),
    Feature(FeatureQuery),
}

/// A selected query with its candidate rewards and their expected features
/// in the training environment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    /// 1-based round number.
    pub id: u64,
    pub query: Query,
    pub candidates: Vec<Vec<f64>>,
    /// One row per candidate, in the experiment's expectation basis.
    pub expectations: Array2<f64>,
}

/// One active reward-design run: training environment, posterior, proxy
/// cache and test suite. Drives both batch runs and interactive sessions.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    seeds: SeedBundle,
    env: Arc<Environment>,
    posterior: Posterior,
    true_reward: RewardVector,
    pool: Option<ProxyPool>,
    cache: Option<FeatureExpectationCache>,
    tests: TestSuite,
    query_rng: ChaCha8Rng,
    answered: usize,
    metrics: MetricsRecord,
    clock: Instant,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let clock = Instant::now();
        let seeds = SeedBundle::derive(config.seed);
        let env = Arc::new(generate_env(&config, seeds.env)?);
        let d = config.n_features;
        let inference_kind = config.inference_kind();
        let space = Arc::new(sample_true_space(
            seeds.true_space,
            config.true_space_size,
            d,
            -WEIGHT_BOUND,
            WEIGHT_BOUND,
            inference_kind,
        )?);
        let true_reward = if inference_kind == config.true_space_kind {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.designer);
            space.member(rng.random_range(0..space.len()))
        } else {
            sample_true_space(seeds.designer, 1, d, -WEIGHT_BOUND, WEIGHT_BOUND, config.true_space_kind)?.member(0)
        };

        let (pool, cache) = match config.query_type {
            QueryType::Discrete => {
                let pool = if config.pool_is_true_space {
                    ProxyPool { members: space.weights.clone(), seed: seeds.true_space }
                } else {
                    crate::reward_space::sample_proxy_pool(seeds.pool, config.pool_size, d)?
                };
                let cache = build_cache(&env, &pool, &config.planner, config.expectation_kind(), CacheMode::Exact)?;
                (Some(pool), Some(cache))
            }
            QueryType::Feature => (None, None),
        };

        let test_envs = (0..config.n_test_envs as u64)
            .map(|i| generate_env(&config, seeds.test_envs.wrapping_add(i)))
            .collect::<Result<Vec<_>>>()?;
        let tests = TestSuite::new(test_envs, &true_reward.weights, config.planner.horizon)?;

        let posterior = Posterior::uniform(space);
        let mut exp = Self {
            query_rng: ChaCha8Rng::seed_from_u64(seeds.queries),
            config,
            seeds,
            env,
            posterior,
            true_reward,
            pool,
            cache,
            tests,
            answered: 0,
            metrics: MetricsRecord::default(),
            clock,
        };
        exp.record()?;
        Ok(exp)
    }

    fn record(&mut self) -> Result<StepMetrics> {
        let m = StepMetrics {
            step: self.answered,
            regret: self.tests.regret(&self.posterior.mean().weights)?,
            entropy: self.posterior.entropy(),
            seconds: self.clock.elapsed().as_secs_f64(),
        };
        self.clock = Instant::now();
        self.metrics.steps.push(m.clone());
        Ok(m)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seeds(&self) -> &SeedBundle {
        &self.seeds
    }

    pub fn env(&self) -> &Arc<Environment> {
        &self.env
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    pub fn true_reward(&self) -> &RewardVector {
        &self.true_reward
    }

    pub fn pool(&self) -> Option<&ProxyPool> {
        self.pool.as_ref()
    }

    pub fn cache(&self) -> Option<&FeatureExpectationCache> {
        self.cache.as_ref()
    }

    pub fn tests(&self) -> &TestSuite {
        &self.tests
    }

    pub fn metrics(&self) -> &MetricsRecord {
        &self.metrics
    }

    pub fn into_metrics(self) -> MetricsRecord {
        self.metrics
    }

    pub fn answered(&self) -> usize {
        self.answered
    }

    pub fn is_finished(&self) -> bool {
        self.answered >= self.config.n_queries
    }

    /// The simulated designer holding this experiment's true reward.
    pub fn designer(&self) -> SimulatedDesigner {
        SimulatedDesigner::new(self.true_reward.clone(), self.config.designer_beta, self.seeds.answers)
    }

    pub fn candidate_planner(&self) -> CandidatePlanner<'_> {
        CandidatePlanner { env: &self.env, planner: self.config.planner, kind: self.config.expectation_kind() }
    }

    fn particles(&self, seed: u64) -> Result<Posterior> {
        if self.config.mi_samples >= self.posterior.len() {
            Ok(self.posterior.clone())
        } else {
            self.posterior.subsample(self.config.mi_samples, seed)
        }
    }

    /// Selects the next query. Every call advances the selection seed stream.
    pub fn next_query(&mut self) -> Result<PreparedQuery> {
        if self.is_finished() {
            return Err(invalid("all queries have been asked"));
        }
        let select_seed = self.query_rng.next_u64();
        let particle_seed = self.query_rng.next_u64();
        let cfg = &self.config;
        let k = cfg.query_size;
        let id = self.answered as u64 + 1;
        match cfg.query_type {
            QueryType::Discrete => {
                let pool = self.pool.as_ref().expect("discrete experiments have a pool");
                let cache = self.cache.as_ref().expect("discrete experiments have a cache");
                let q = match cfg.selection {
                    Selection::Greedy => {
                        let particles = self.particles(particle_seed)?;
                        greedy_discrete_query(&particles, cache.expectations.view(), k, cfg.beta, select_seed)?
                    }
                    Selection::Random => random_discrete_query(pool.len(), k, select_seed)?,
                    Selection::RandomSearch => {
                        let particles = self.particles(particle_seed)?;
                        random_search_query(
                            &particles,
                            cache.expectations.view(),
                            k,
                            cfg.random_search_trials,
                            cfg.beta,
                            select_seed,
                        )?
                    }
                    Selection::FullIrd => DiscreteQuery { proxies: (0..pool.len()).collect() },
                };
                Ok(PreparedQuery {
                    id,
                    candidates: q.proxies.iter().map(|&i| pool.member(i).weights).collect(),
                    expectations: cache.select(&q.proxies),
                    query: Query::Discrete(q),
                })
            }
            QueryType::Feature => {
                let planner = self.candidate_planner();
                let fq = match cfg.selection {
                    Selection::Greedy => {
                        let particles = self.particles(particle_seed)?;
                        greedy_feature_query(&particles, &planner, k, cfg.fixed_weights, cfg.beta, &cfg.feature, select_seed)?
                            .query
                    }
                    Selection::Random => random_feature_query(cfg.n_features, k, &cfg.feature, select_seed)?,
                    Selection::RandomSearch | Selection::FullIrd => {
                        return Err(invalid("feature queries support greedy or random selection"))
                    }
                };
                let (candidates, expectations) = expand_feature_query(&fq, &planner)?;
                Ok(PreparedQuery { id, query: Query::Feature(fq), candidates, expectations })
            }
        }
    }

    /// Bayesian update with the designer's choice, then records metrics.
    pub fn answer(&mut self, query: &PreparedQuery, answer: usize) -> Result<StepMetrics> {
        if query.id != self.answered as u64 + 1 {
            return Err(invalid(format!("query {} is not the current query", query.id)));
        }
        let e = leading(query.expectations.view(), self.posterior.dim())?;
        self.posterior = self.posterior.update(e, answer, self.config.beta)?;
        self.answered += 1;
        self.record()
    }
}

/// Full experiment with the simulated designer answering every query.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsRecord> {
    let mut exp = Experiment::new(config.clone())?;
    let mut designer = exp.designer();
    while !exp.is_finished() {
        let q = exp.next_query()?;
        let a = designer.answer(q.expectations.view())?;
        exp.answer(&q, a)?;
    }
    Ok(exp.into_metrics())
}

/// Embeds a reward into a space of vectors with a common feature basis,
/// for posterior means over mixed spaces.
pub fn embed(reward: &RewardVector, kind: SpaceKind) -> RewardVector {
    match kind {
        SpaceKind::Linear => reward.clone(),
        SpaceKind::Quadratic => reward.to_quadratic(),
    }
}

#[doc(hidden)]
pub fn uniform_posterior(space: RewardSpace) -> Posterior {
    Posterior::uniform(Arc::new(space))
}
