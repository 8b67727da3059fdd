use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// One decision among `N` flights, each described by `D` features.
#[derive(Debug, Clone)]
pub struct FlightEnvironment {
    /// `N x D`, row `i` describes flight `i`.
    pub features: Array2<f64>,
    pub seed: u64,
    pub(super) expanded: OnceLock<Array2<f64>>,
}

impl FlightEnvironment {
    pub fn new(features: Array2<f64>, seed: u64) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(invalid("flight environment needs at least one flight and one feature"));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flight features"));
        }
        Ok(Self { features, seed, expanded: super::lazy_matrix() })
    }

    pub fn n_flights(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

/// Draws every flight's features i.i.d. from a standard normal, row by row.
pub fn generate_flight_env(seed: u64, n_flights: usize, n_features: usize) -> Result<FlightEnvironment> {
    if n_flights == 0 {
        return Err(invalid("n_flights must be at least 1"));
    }
    if n_features == 0 {
        return Err(invalid("n_features must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..n_flights * n_features).map(|_| rng.sample(StandardNormal)).collect();
    let features = Array2::from_shape_vec((n_flights, n_features), flat).expect("flight shape");
    FlightEnvironment::new(features, seed)
}
