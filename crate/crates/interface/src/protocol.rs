//! JSON bodies of the session service.

use aird::environments::{Cell, Environment};
use aird::experiment::{ExperimentConfig, MetricsRecord, Query, StepMetrics};
use aird::inference::PosteriorSummary;
use aird::planning::greedy_trajectory;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingAnswer,
    Idle,
    Finished,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Master seed; defaults to the service configuration's seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Configuration keys that override the service defaults.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub status: Status,
    pub n_queries: usize,
    pub config: ExperimentConfig,
    pub posterior: PosteriorSummary,
}

/// Path an agent takes when it plans greedily with some reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryRender {
    /// Cells visited, start first.
    Grid { cells: Vec<Cell> },
    /// The chosen flight and its features.
    Flight { flight: usize, features: Vec<f64> },
}

impl TrajectoryRender {
    pub fn plan(env: &Environment, weights: &[f64], horizon: usize) -> aird::Result<Self> {
        let path = greedy_trajectory(env, weights, horizon)?;
        Ok(match env {
            Environment::Grid(g) => TrajectoryRender::Grid { cells: path.states.iter().map(|&s| g.cell(s)).collect() },
            Environment::Flight(_) => {
                let state = *path.states.last().expect("paths have a start");
                TrajectoryRender::Flight { flight: state.saturating_sub(1), features: env.state_features(state)? }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub index: usize,
    pub weights: Vec<f64>,
    /// Expected features in the training environment under the candidate's
    /// soft-optimal policy.
    pub expected_features: Vec<f64>,
    pub trajectory: TrajectoryRender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub query_id: u64,
    pub query: Query,
    pub candidates: Vec<CandidateView>,
    pub posterior: PosteriorSummary,
}

/// A candidate index, or free weights for a feature query that are mapped
/// to the nearest grid candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Index(usize),
    FreeWeights { free_weights: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub query_id: u64,
    pub answer: Answer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerAccepted {
    pub query_id: u64,
    pub answer_index: usize,
    pub metrics: StepMetrics,
    pub posterior: PosteriorSummary,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query_id: u64,
    pub query: Query,
    pub answer: Answer,
    pub answer_index: usize,
    /// Seconds since the Unix epoch.
    pub answered_at: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub status: Status,
    pub config: ExperimentConfig,
    pub answered: usize,
    pub n_queries: usize,
    pub outstanding_query_id: Option<u64>,
    pub history: Vec<HistoryEntry>,
    pub metrics: MetricsRecord,
    pub posterior: PosteriorSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviewRequest {
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preview {
    pub expected_features: Vec<f64>,
    pub trajectory: TrajectoryRender,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
