//! Bayesian inverse reward design restricted to a query.
//!
//! The designer picks candidate `k` of a query with probability
//! proportional to `exp(beta * r . E[phi | candidate k])`, normalized over the
//! query only. The posterior over a finite sample of true rewards is kept in
//! the log domain and renormalized after every update.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::reward_space::{dot, RewardSpace, RewardVector};

/// `log sum exp`, with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Distribution over a query's candidates for one true reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLikelihood {
    pub probs: Vec<f64>,
}

/// Log-probabilities of each answer given expected true utilities.
pub fn answer_log_probs(utilities: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = utilities.iter().map(|u| beta * u).collect();
    let z = log_sum_exp(&scaled);
    scaled.into_iter().map(|s| s - z).collect()
}

/// `expectations` holds one row of expected features per query candidate.
pub fn answer_likelihood(
    expectations: ArrayView2<'_, f64>,
    true_reward: &[f64],
    beta: f64,
) -> Result<AnswerLikelihood> {
    if expectations.nrows() == 0 {
        return Err(Error::EmptyQuery);
    }
    check_dim(expectations.ncols(), true_reward.len())?;
    let utilities: Vec<f64> = expectations.rows().into_iter().map(|e| dot(&e.to_vec(), true_reward)).collect();
    let probs = answer_log_probs(&utilities, beta).into_iter().map(f64::exp).collect();
    Ok(AnswerLikelihood { probs })
}

/// Belief over a fixed candidate set of true rewards.
#[derive(Debug, Clone)]
pub struct Posterior {
    space: Arc<RewardSpace>,
    log_probs: Vec<f64>,
}

impl Posterior {
    pub fn uniform(space: Arc<RewardSpace>) -> Self {
        let n = space.len();
        let lp = -(n as f64).ln();
        Self { space, log_probs: vec![lp; n] }
    }

    /// Normalizes arbitrary log weights.
    pub fn from_log_weights(space: Arc<RewardSpace>, log_weights: Vec<f64>) -> Result<Self> {
        check_dim(space.len(), log_weights.len())?;
        let z = log_sum_exp(&log_weights);
        if !z.is_finite() {
            return Err(Error::NonFinite("posterior normalizer"));
        }
        let log_probs = log_weights.into_iter().map(|w| w - z).collect();
        Ok(Self { space, log_probs })
    }

    pub fn space(&self) -> &Arc<RewardSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Length of every candidate reward vector.
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Expected true utility of each candidate (rows) for each query
    /// candidate (columns).
    pub fn utilities(&self, expectations: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.dim(), expectations.ncols())?;
        Ok(self.space.weights.dot(&expectations.t()).as_standard_layout().into_owned())
    }

    pub fn update(&self, expectations: ArrayView2<'_, f64>, answer: usize, beta: f64) -> Result<Posterior> {
        if expectations.nrows() == 0 {
            return Err(Error::EmptyQuery);
        }
        if answer >= expectations.nrows() {
            return Err(invalid(format!("answer {answer} outside a query of {}", expectations.nrows())));
        }
        let u = self.utilities(expectations)?;
        let mut log_weights = Vec::with_capacity(self.len());
        for (row, lp) in u.rows().into_iter().zip(&self.log_probs) {
            let ll = answer_log_probs(&row.to_vec(), beta)[answer];
            // every answer has positive likelihood
            if !ll.is_finite() {
                return Err(Error::NonFinite("answer likelihood"));
            }
            log_weights.push(lp + ll);
        }
        Posterior::from_log_weights(self.space.clone(), log_weights)
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| {
                let p = l.exp();
                if p > 0.0 {
                    p * l
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    }

    pub fn mean(&self) -> RewardVector {
        let mut mean = vec![0.0; self.dim()];
        for (row, lp) in self.space.weights.rows().into_iter().zip(&self.log_probs) {
            let p = lp.exp();
            if p == 0.0 {
                continue;
            }
            for (m, w) in mean.iter_mut().zip(row) {
                *m += p * w;
            }
        }
        RewardVector { weights: mean, kind: self.space.kind }
    }

    /// Draws `n` candidates with replacement in proportion to their
    /// probability and returns them with uniform weights.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Posterior> {
        if n == 0 {
            return Err(invalid("subsample size must be at least 1"));
        }
        let dist = WeightedIndex::new(self.probs()).map_err(|e| invalid(format!("posterior weights: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let weights = self.space.weights.select(ndarray::Axis(0), &picks);
        let space = RewardSpace::new(self.space.kind, self.space.base_dim, weights)?;
        Ok(Posterior::uniform(Arc::new(space)))
    }

    pub fn summary(&self, top_k: usize) -> PosteriorSummary {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.log_probs[b].total_cmp(&self.log_probs[a]).then(a.cmp(&b)));
        PosteriorSummary {
            n_candidates: self.len(),
            entropy: self.entropy(),
            mean: self.mean().weights,
            top: order
                .into_iter()
                .take(top_k)
                .map(|index| RankedCandidate {
                    index,
                    probability: self.log_probs[index].exp(),
                    weights: self.space.row(index).to_vec(),
                })
                .collect(),
        }
    }
}

pub fn posterior_update(posterior: &Posterior, expectations: ArrayView2<'_, f64>, answer: usize, beta: f64) -> Result<Posterior> {
    posterior.update(expectations, answer, beta)
}

pub fn posterior_entropy(posterior: &Posterior) -> f64 {
    posterior.entropy()
}

pub fn posterior_mean(posterior: &Posterior) -> RewardVector {
    posterior.mean()
}

pub fn subsample_posterior(posterior: &Posterior, n: usize, seed: u64) -> Result<Posterior> {
    posterior.subsample(n, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub probability: f64,
    pub weights: Vec<f64>,
}

/// Snapshot of a posterior for logs and the session service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_candidates: usize,
    pub entropy: f64,
    pub mean: Vec<f64>,
    pub top: Vec<RankedCandidate>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_space::{sample_true_space, SpaceKind};
    use ndarray::array;

    fn space(rows: Array2<f64>) -> Arc<RewardSpace> {
        let d = rows.ncols();
        Arc::new(RewardSpace::new(SpaceKind::Linear, d, rows).unwrap())
    }

    #[test]
    fn likelihood_examples() {
        let e = array![[1.0], [0.0]];
        let l = answer_likelihood(e.view(), &[1.0], 0.0).unwrap();
        assert!(l.probs.iter().all(|p| (p - 0.5).abs() < 1e-15));
        let l = answer_likelihood(e.view(), &[1.0], 0.5).unwrap();
        let expected = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        assert!((l.probs[0] - expected).abs() < 1e-12);
        assert!((l.probs[0] - 0.6225).abs() < 1e-4);
        let same = array![[2.0, 1.0], [2.0, 1.0]];
        let l = answer_likelihood(same.view(), &[3.0, -1.0], 0.5).unwrap();
        assert!(l.probs.iter().all(|p| (p - 0.5).abs() < 1e-15));
        assert!(answer_likelihood(e.view(), &[1.0, 2.0], 0.5).is_err());
        assert!(answer_likelihood(Array2::<f64>::zeros((0, 1)).view(), &[1.0], 0.5).is_err());
    }

    #[test]
    fn hand_bayes_update() {
        // candidate A: P(answer 0) = 0.8, candidate B: 0.4
        let s = space(array![[(0.8f64 / 0.2).ln()], [(0.4f64 / 0.6).ln()]]);
        let e = array![[1.0], [0.0]];
        let post = Posterior::uniform(s).update(e.view(), 0, 1.0).unwrap();
        let p = post.probs();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_candidates_leave_posterior_unchanged() {
        let s = Arc::new(sample_true_space(1, 50, 3, -9.0, 9.0, SpaceKind::Linear).unwrap());
        let prior = Posterior::uniform(s);
        let e = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let post = prior.update(e.view(), 1, 0.5).unwrap();
        for (a, b) in post.log_probs().iter().zip(prior.log_probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(prior.update(e.view(), 2, 0.5).is_err());
    }

    #[test]
    fn repeated_answers_concentrate() {
        let s = Arc::new(sample_true_space(2, 200, 2, -9.0, 9.0, SpaceKind::Linear).unwrap());
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let mut post = Posterior::uniform(s.clone());
        let target = (0..s.len())
            .max_by(|&a, &b| {
                let la = answer_log_probs(&[s.weights[[a, 0]], s.weights[[a, 1]]], 0.5)[0];
                let lb = answer_log_probs(&[s.weights[[b, 0]], s.weights[[b, 1]]], 0.5)[0];
                la.total_cmp(&lb)
            })
            .unwrap();
        let mut prev = 0.0;
        for _ in 0..50 {
            post = post.update(e.view(), 0, 0.5).unwrap();
            let p = post.probs()[target];
            assert!(p >= prev);
            prev = p;
        }
        let argmax = (0..s.len()).max_by(|&a, &b| post.log_probs()[a].total_cmp(&post.log_probs()[b])).unwrap();
        assert_eq!(argmax, target);
    }

    #[test]
    fn entropy_examples() {
        let s = Arc::new(sample_true_space(0, 10_000, 2, -9.0, 9.0, SpaceKind::Linear).unwrap());
        assert!((Posterior::uniform(s).entropy() - 9.2103).abs() < 1e-4);
        let two = space(array![[0.0, 0.0], [4.0, 8.0]]);
        let p = Posterior::from_log_weights(two.clone(), vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        assert!((p.entropy() - 0.5623).abs() < 1e-4);
        let mean = p.mean().weights;
        assert!((mean[0] - 3.0).abs() < 1e-12 && (mean[1] - 6.0).abs() < 1e-12);
        let point = Posterior::from_log_weights(two, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(point.entropy(), 0.0);
        assert_eq!(point.mean().weights, vec![0.0, 0.0]);
    }

    #[test]
    fn symmetric_mean_is_zero() {
        let p = Posterior::uniform(space(array![[1.5, -2.0], [-1.5, 2.0]]));
        assert_eq!(p.mean().weights, vec![0.0, 0.0]);
    }

    #[test]
    fn subsample_point_mass_and_determinism() {
        let s = space(array![[1.0], [2.0], [3.0]]);
        let point = Posterior::from_log_weights(s.clone(), vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap();
        let sub = point.subsample(10, 3).unwrap();
        assert!(sub.space().weights.iter().all(|&w| w == 2.0));
        let u = Posterior::uniform(s);
        assert_eq!(u.subsample(20, 9).unwrap().space().weights, u.subsample(20, 9).unwrap().space().weights);
        assert!(u.subsample(0, 9).is_err());
    }

    #[test]
    fn summary_orders_candidates() {
        let s = space(array![[1.0], [2.0], [3.0]]);
        let p = Posterior::from_log_weights(s, vec![0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()]).unwrap();
        let sum = p.summary(2);
        assert_eq!(sum.top.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2]);
        let json = serde_json::to_string(&sum).unwrap();
        let back: PosteriorSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sum);
    }
}
