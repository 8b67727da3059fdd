use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Grid coordinate, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Cell) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        dx.hypot(dy)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([x, y]: [usize; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

/// Action index order used by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Chilly World: walls, objects at fixed cells and a start cell. The state
/// of cell `(x, y)` is `y * width + x`.
#[derive(Debug, Clone)]
pub struct GridEnvironment {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub walls: Vec<bool>,
    pub objects: Vec<Cell>,
    pub start: Cell,
    pub seed: u64,
    pub(crate) successors: Vec<[usize; 4]>,
    /// `cells x objects`; entry `j` is minus the distance to object `j`.
    pub(crate) features: Array2<f64>,
    pub(super) expanded: OnceLock<Array2<f64>>,
}

impl GridEnvironment {
    pub fn new(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        objects: Vec<Cell>,
        start: Cell,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("grid must have at least one cell"));
        }
        if walls.len() != width * height {
            return Err(invalid(format!("wall mask has {} cells, grid has {}", walls.len(), width * height)));
        }
        let inside = |c: Cell| c.x < width && c.y < height;
        let idx = |c: Cell| c.y * width + c.x;
        for (j, &o) in objects.iter().enumerate() {
            if !inside(o) {
                return Err(invalid(format!("object {j} outside the grid")));
            }
            if walls[idx(o)] {
                return Err(invalid(format!("object {j} sits on a wall")));
            }
            if objects[..j].contains(&o) {
                return Err(invalid(format!("object {j} shares a cell")));
            }
        }
        if !inside(start) || walls[idx(start)] {
            return Err(invalid("start must be a free cell inside the grid"));
        }

        let n = width * height;
        let mut successors = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let s = y * width + x;
                let mut next = [s; 4];
                for m in Move::ALL {
                    let target = match m {
                        Move::Up => y.checked_sub(1).map(|y| (x, y)),
                        Move::Down => (y + 1 < height).then_some((x, y + 1)),
                        Move::Left => x.checked_sub(1).map(|x| (x, y)),
                        Move::Right => (x + 1 < width).then_some((x + 1, y)),
                    };
                    if let Some((tx, ty)) = target {
                        let t = ty * width + tx;
                        if !walls[t] {
                            next[m.index()] = t;
                        }
                    }
                }
                successors.push(next);
            }
        }

        let mut features = Array2::zeros((n, objects.len()));
        for y in 0..height {
            for x in 0..width {
                let cell = Cell::new(x, y);
                for (j, &o) in objects.iter().enumerate() {
                    features[[y * width + x, j]] = -cell.distance(o);
                }
            }
        }

        Ok(Self {
            width,
            height,
            walls,
            objects,
            start,
            seed,
            successors,
            features,
            expanded: super::lazy_matrix(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn state_id(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cell(&self, state: usize) -> Cell {
        Cell::new(state % self.width, state / self.width)
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[self.state_id(cell)]
    }

    pub fn wall_count(&self) -> usize {
        self.walls.iter().filter(|&&w| w).count()
    }
}

/// Samples a square Chilly World.
///
/// Objects go first, on distinct uniformly chosen cells (object `j` is the
/// `j`-th draw). Then every other cell, in row-major order, becomes a wall
/// with probability `wall_prob`. The start is uniform over the remaining free
/// cells; if none remain, a uniformly chosen cell is cleared for it.
pub fn generate_grid_env(seed: u64, size: usize, n_objects: usize, wall_prob: f64) -> Result<GridEnvironment> {
    if size == 0 {
        return Err(invalid("grid size must be at least 1"));
    }
    let n = size * size;
    if n_objects > n {
        return Err(invalid(format!("{n_objects} objects do not fit in {n} cells")));
    }
    if !(0.0..1.0).contains(&wall_prob) {
        return Err(invalid(format!("wall probability {wall_prob} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object_ids = rand::seq::index::sample(&mut rng, n, n_objects).into_vec();
    let mut occupied = vec![false; n];
    for &o in &object_ids {
        occupied[o] = true;
    }
    let mut walls = vec![false; n];
    for s in 0..n {
        if !occupied[s] && rng.random::<f64>() < wall_prob {
            walls[s] = true;
        }
    }
    let free: Vec<usize> = (0..n).filter(|&s| !walls[s]).collect();
    let start = if free.is_empty() {
        let s = rng.random_range(0..n);
        walls[s] = false;
        s
    } else {
        free[rng.random_range(0..free.len())]
    };
    let cell = |s: usize| Cell::new(s % size, s / size);
    let objects = object_ids.into_iter().map(cell).collect();
    GridEnvironment::new(size, size, walls, objects, cell(start), seed)
}
