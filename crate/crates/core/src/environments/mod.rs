//! Benchmark decision problems: flight shopping and the Chilly World
//! gridworld. Both are deterministic and reward-free; rewards enter only
//! through per-state features.

mod flight;
mod grid;

use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward_space::{quadratic_expand_rows, SpaceKind};

pub use flight::{generate_flight_env, FlightEnvironment};
pub use grid::{generate_grid_env, Cell, GridEnvironment, Move};

/// A state/action sequence. `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn concat(&self, other: &Trajectory) -> Result<Trajectory> {
        if self.states.last() != other.states.first() {
            return Err(Error::InvalidTrajectory("concatenated pieces do not meet".into()));
        }
        let mut states = self.states.clone();
        states.extend_from_slice(&other.states[1..]);
        let mut actions = self.actions.clone();
        actions.extend_from_slice(&other.actions);
        Ok(Trajectory { states, actions })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentDocument", into = "EnvironmentDocument")]
pub enum Environment {
    Flight(FlightEnvironment),
    Grid(GridEnvironment),
}

impl From<FlightEnvironment> for Environment {
    fn from(env: FlightEnvironment) -> Self {
        Environment::Flight(env)
    }
}

impl From<GridEnvironment> for Environment {
    fn from(env: GridEnvironment) -> Self {
        Environment::Grid(env)
    }
}

impl Environment {
    pub fn seed(&self) -> u64 {
        match self {
            Environment::Flight(f) => f.seed,
            Environment::Grid(g) => g.seed,
        }
    }

    /// Base feature dimension D.
    pub fn n_features(&self) -> usize {
        match self {
            Environment::Flight(f) => f.n_features(),
            Environment::Grid(g) => g.objects.len(),
        }
    }

    /// Flight: the pre-decision state plus one state per flight.
    pub fn n_states(&self) -> usize {
        match self {
            Environment::Flight(f) => f.n_flights() + 1,
            Environment::Grid(g) => g.n_cells(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Environment::Flight(f) => f.n_flights(),
            Environment::Grid(_) => Move::ALL.len(),
        }
    }

    pub fn start(&self) -> usize {
        match self {
            Environment::Flight(_) => 0,
            Environment::Grid(g) => g.state_id(g.start),
        }
    }

    /// Deterministic successor. Flight states after the decision are
    /// absorbing.
    pub fn successor(&self, state: usize, action: usize) -> Result<usize> {
        self.check_state(state)?;
        if action >= self.n_actions() {
            return Err(Error::InvalidArgument(format!("action {action} out of range")));
        }
        Ok(match self {
            Environment::Flight(_) => {
                if state == 0 {
                    action + 1
                } else {
                    state
                }
            }
            Environment::Grid(g) => g.successors[state][action],
        })
    }

    fn check_state(&self, state: usize) -> Result<()> {
        let n = self.n_states();
        if state < n {
            Ok(())
        } else {
            Err(Error::InvalidState { state, n_states: n })
        }
    }

    pub fn state_features(&self, state: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(match self {
            Environment::Flight(f) => {
                if state == 0 {
                    vec![0.0; f.n_features()]
                } else {
                    f.features.row(state - 1).to_vec()
                }
            }
            Environment::Grid(g) => g.features.row(state).to_vec(),
        })
    }

    /// Feature rows used by the planner: one row per flight, or one row per
    /// grid cell, in the basis of `kind`.
    pub fn feature_rows(&self, kind: SpaceKind) -> &Array2<f64> {
        let (base, expanded) = match self {
            Environment::Flight(f) => (&f.features, &f.expanded),
            Environment::Grid(g) => (&g.features, &g.expanded),
        };
        match kind {
            SpaceKind::Linear => base,
            SpaceKind::Quadratic => expanded.get_or_init(|| quadratic_expand_rows(base)),
        }
    }

    /// Row of `feature_rows` for a state, `None` for the flight pre-decision
    /// state (whose features are zero).
    pub(crate) fn feature_row_index(&self, state: usize) -> Option<usize> {
        match self {
            Environment::Flight(_) => state.checked_sub(1),
            Environment::Grid(_) => Some(state),
        }
    }

    pub fn validate_trajectory(&self, traj: &Trajectory) -> Result<()> {
        if traj.states.len() != traj.actions.len() + 1 {
            return Err(Error::InvalidTrajectory(format!(
                "{} states for {} actions",
                traj.states.len(),
                traj.actions.len()
            )));
        }
        for (i, &a) in traj.actions.iter().enumerate() {
            let next = self
                .successor(traj.states[i], a)
                .map_err(|e| Error::InvalidTrajectory(e.to_string()))?;
            if next != traj.states[i + 1] {
                return Err(Error::InvalidTrajectory(format!(
                    "step {i}: action {a} from state {} leads to {next}, not {}",
                    traj.states[i],
                    traj.states[i + 1]
                )));
            }
        }
        Ok(())
    }

    /// Undiscounted sum of the features of every state entered by an action.
    /// The start state does not count.
    pub fn trajectory_features(&self, traj: &Trajectory, kind: SpaceKind) -> Result<Vec<f64>> {
        self.validate_trajectory(traj)?;
        let rows = self.feature_rows(kind);
        let mut total = vec![0.0; rows.ncols()];
        for &s in &traj.states[1..] {
            if let Some(r) = self.feature_row_index(s) {
                for (acc, v) in total.iter_mut().zip(rows.row(r)) {
                    *acc += v;
                }
            }
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Wire format for environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvironmentDocument {
    Flight {
        n_flights: usize,
        n_features: usize,
        /// Row-major `n_flights x n_features`.
        features: Vec<f64>,
        seed: u64,
    },
    Grid {
        width: usize,
        height: usize,
        /// Row-major, one `0`/`1` character per cell.
        walls: String,
        objects: Vec<Cell>,
        start: Cell,
        seed: u64,
    },
}

impl From<Environment> for EnvironmentDocument {
    fn from(env: Environment) -> Self {
        match env {
            Environment::Flight(f) => EnvironmentDocument::Flight {
                n_flights: f.n_flights(),
                n_features: f.n_features(),
                features: f.features.iter().copied().collect(),
                seed: f.seed,
            },
            Environment::Grid(g) => EnvironmentDocument::Grid {
                width: g.width,
                height: g.height,
                walls: g.walls.iter().map(|&w| if w { '1' } else { '0' }).collect(),
                objects: g.objects.clone(),
                start: g.start,
                seed: g.seed,
            },
        }
    }
}

impl TryFrom<EnvironmentDocument> for Environment {
    type Error = Error;

    fn try_from(doc: EnvironmentDocument) -> Result<Self> {
        match doc {
            EnvironmentDocument::Flight { n_flights, n_features, features, seed } => {
                let features = Array2::from_shape_vec((n_flights, n_features), features)
                    .map_err(|e| Error::InvalidArgument(format!("flight features: {e}")))?;
                Ok(FlightEnvironment::new(features, seed)?.into())
            }
            EnvironmentDocument::Grid { width, height, walls, objects, start, seed } => {
                let walls = walls
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::InvalidArgument(format!("wall mask character {other:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GridEnvironment::new(width, height, walls, objects, start, seed)?.into())
            }
        }
    }
}

pub(crate) fn lazy_matrix() -> OnceLock<Array2<f64>> {
    OnceLock::new()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_grid() {
        let env: Environment = generate_grid_env(5, 6, 4, 0.3).unwrap().into();
        let json = env.to_json().unwrap();
        let back = Environment::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.feature_rows(SpaceKind::Linear), env.feature_rows(SpaceKind::Linear));
    }

    #[test]
    fn json_round_trip_flight() {
        let env: Environment = generate_flight_env(2, 7, 3).unwrap().into();
        let back = Environment::from_json(&env.to_json().unwrap()).unwrap();
        assert_eq!(back.feature_rows(SpaceKind::Linear), env.feature_rows(SpaceKind::Linear));
    }

    #[test]
    fn malformed_documents_rejected() {
        let bad_mask = r#"{"kind":"grid","width":2,"height":1,"walls":"0x","objects":[],"start":[0,0],"seed":0}"#;
        assert!(Environment::from_json(bad_mask).is_err());
        let start_in_wall = r#"{"kind":"grid","width":2,"height":1,"walls":"10","objects":[],"start":[0,0],"seed":0}"#;
        assert!(Environment::from_json(start_in_wall).is_err());
        let short = r#"{"kind":"flight","n_flights":2,"n_features":2,"features":[1.0],"seed":0}"#;
        assert!(Environment::from_json(short).is_err());
    }

    #[test]
    fn empty_trajectory_has_zero_features() {
        let env: Environment = generate_grid_env(1, 4, 3, 0.0).unwrap().into();
        let t = Trajectory { states: vec![env.start()], actions: vec![] };
        assert_eq!(env.trajectory_features(&t, SpaceKind::Linear).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn invalid_state_and_trajectory() {
        let env: Environment = generate_grid_env(1, 3, 2, 0.0).unwrap().into();
        assert!(matches!(env.state_features(9), Err(Error::InvalidState { .. })));
        let t = Trajectory { states: vec![0, 5], actions: vec![0] };
        assert!(env.trajectory_features(&t, SpaceKind::Linear).is_err());
        let t = Trajectory { states: vec![0], actions: vec![0] };
        assert!(env.validate_trajectory(&t).is_err());
    }

    #[test]
    fn flight_trajectory_is_chosen_row() {
        let f = generate_flight_env(3, 5, 4).unwrap();
        let row = f.features.row(2).to_vec();
        let env: Environment = f.into();
        let t = Trajectory { states: vec![0, 3], actions: vec![2] };
        assert_eq!(env.trajectory_features(&t, SpaceKind::Linear).unwrap(), row);
        assert_eq!(env.state_features(0).unwrap(), vec![0.0; 4]);
        assert_eq!(env.state_features(3).unwrap(), row);
    }
}
