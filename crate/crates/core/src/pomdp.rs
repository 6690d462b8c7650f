//! Target-search POMDP: grid dynamics, noisy neighborhood observations,
//! operator-shaped rewards and the return-to-start battery rule.
//!
//! Rows grow northward, so `Up` is `row + 1`. Observation code 0 means
//! "target not found"; codes `1..=M` index the neighborhood cells in rings of
//! growing Manhattan radius, each ring ordered clockwise from north.

use crate::geogrid::{Cell, GridSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("observation probabilities invalid: z_true {z_true}, z_prox {z_prox}")]
    Observation { z_true: f64, z_prox: f64 },
    #[error("discount must lie in [0, 1), got {0}")]
    Discount(f64),
    #[error("battery cost must be at least 1")]
    BatteryCost,
    #[error("target reward {r_target} must exceed the largest operator reward {max_op}")]
    TargetReward { r_target: f64, max_op: f64 },
    #[error("operator reward map has {got} cells, grid has {expected}")]
    RewardMapSize { got: usize, expected: usize },
    #[error("operator reward map contains a non-finite value at cell {0}")]
    NonFiniteReward(usize),
    #[error("start cell ({row}, {col}) lies outside the grid")]
    StartOutsideGrid { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// (row, col) displacement.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (1, 0),
            Action::Down => (-1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

/// Model parameters as they appear in a scenario document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PomdpConfig {
    pub d_obs: usize,
    pub z_true: f64,
    pub z_prox: f64,
    pub r_time: f64,
    pub r_target: f64,
    pub b_max: u32,
    pub b_cost: u32,
    pub gamma: f64,
    pub n_particles: usize,
}

impl Default for PomdpConfig {
    fn default() -> Self {
        Self {
            d_obs: 1,
            z_true: 0.8,
            z_prox: 0.1,
            r_time: -1.0,
            r_target: 1000.0,
            b_max: 300,
            b_cost: 1,
            gamma: 0.95,
            n_particles: 10_000,
        }
    }
}

impl PomdpConfig {
    pub fn z_neg(&self) -> f64 {
        (1.0 - self.z_true - 2.0 * self.z_prox).max(0.0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = (0.0..=1.0).contains(&self.z_true)
            && (0.0..=1.0).contains(&self.z_prox)
            && self.z_true + 2.0 * self.z_prox <= 1.0 + 1e-12;
        if !ok {
            return Err(ModelError::Observation {
                z_true: self.z_true,
                z_prox: self.z_prox,
            });
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ModelError::Discount(self.gamma));
        }
        if self.b_cost == 0 {
            return Err(ModelError::BatteryCost);
        }
        Ok(())
    }
}

/// Cells the robot has stood on, one bit per cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visited {
    words: Vec<u64>,
}

impl Visited {
    pub fn new(n_cells: usize) -> Self {
        Self {
            words: vec![0; n_cells.div_ceil(64)],
        }
    }

    #[inline]
    pub fn contains(&self, cell: usize) -> bool {
        self.words[cell / 64] >> (cell % 64) & 1 == 1
    }

    /// Returns true when the bit was newly set.
    #[inline]
    pub fn insert(&mut self, cell: usize) -> bool {
        let (w, b) = (cell / 64, cell % 64);
        let fresh = self.words[w] >> b & 1 == 0;
        self.words[w] |= 1 << b;
        fresh
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_subset(&self, other: &Visited) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &bits)| {
            (0..64).filter(move |b| bits >> b & 1 == 1).map(move |b| w * 64 + b)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchState {
    pub robot: usize,
    pub target: usize,
    pub battery: u32,
    pub visited: Visited,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f64,
    /// Operator reward collected by entering an unvisited cell.
    pub operator_reward: f64,
    pub found: bool,
}

/// Symbolic size of the full state space: battery levels x position pairs x visited subsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpaceSize {
    pub battery_levels: u64,
    pub position_pairs: u64,
    pub visited_bits: u64,
}

impl StateSpaceSize {
    pub fn log2(&self) -> f64 {
        (self.battery_levels as f64).log2() + (self.position_pairs as f64).log2() + self.visited_bits as f64
    }
}

#[derive(Debug, Clone)]
pub struct SearchModel {
    grid: GridSpec,
    config: PomdpConfig,
    start: usize,
    operator_reward: Vec<f64>,
    /// `moves[cell * 5 + action]`
    moves: Vec<u32>,
    /// Neighborhood offsets in code order (code = index + 1).
    offsets: Vec<(i64, i64)>,
    /// Dense lookup from offset to code over the (2D+1)^2 box; 0 when outside the diamond.
    code_table: Vec<u16>,
    home_distance: Vec<u32>,
}

/// Neighborhood offsets within Manhattan radius `d`, ring by ring, clockwise from north.
pub fn neighborhood_offsets(d: usize) -> Vec<(i64, i64)> {
    let d = d as i64;
    let mut out = Vec::new();
    for ring in 0..=d {
        let mut cells: Vec<(i64, i64)> = Vec::new();
        for dr in -ring..=ring {
            let rest = ring - dr.abs();
            cells.push((dr, rest));
            if rest != 0 {
                cells.push((dr, -rest));
            }
        }
        // bearing clockwise from north (+row)
        let bearing = |&(dr, dc): &(i64, i64)| {
            let a = (dc as f64).atan2(dr as f64);
            if a < 0.0 {
                a + std::f64::consts::TAU
            } else {
                a
            }
        };
        cells.sort_by(|a, b| bearing(a).total_cmp(&bearing(b)));
        out.extend(cells);
    }
    out
}

impl SearchModel {
    pub fn new(grid: GridSpec, config: PomdpConfig, start: Cell, operator_reward: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        if !grid.contains(start) {
            return Err(ModelError::StartOutsideGrid {
                row: start.row,
                col: start.col,
            });
        }
        if operator_reward.len() != grid.n_cells() {
            return Err(ModelError::RewardMapSize {
                got: operator_reward.len(),
                expected: grid.n_cells(),
            });
        }
        if let Some(i) = operator_reward.iter().position(|r| !r.is_finite()) {
            return Err(ModelError::NonFiniteReward(i));
        }
        let max_op = operator_reward.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if config.r_target <= max_op {
            return Err(ModelError::TargetReward {
                r_target: config.r_target,
                max_op,
            });
        }
        let (rows, cols) = (grid.n_rows as i64, grid.n_cols as i64);
        let mut moves = Vec::with_capacity(grid.n_cells() * 5);
        for cell in grid.cells() {
            for a in Action::ALL {
                let (dr, dc) = a.delta();
                let (r, c) = (cell.row as i64 + dr, cell.col as i64 + dc);
                let next = if r < 0 || c < 0 || r >= rows || c >= cols {
                    cell
                } else {
                    Cell::new(r as usize, c as usize)
                };
                moves.push(grid.index(next) as u32);
            }
        }
        let offsets = neighborhood_offsets(config.d_obs);
        let d = config.d_obs as i64;
        let side = (2 * d + 1) as usize;
        let mut code_table = vec![0u16; side * side];
        for (k, &(dr, dc)) in offsets.iter().enumerate() {
            code_table[((dr + d) as usize) * side + (dc + d) as usize] = (k + 1) as u16;
        }
        let home_distance = grid.cells().map(|c| c.manhattan(start) as u32).collect();
        Ok(Self {
            start: grid.index(start),
            grid,
            config,
            operator_reward,
            moves,
            offsets,
            code_table,
            home_distance,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &PomdpConfig {
        &self.config
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn operator_reward(&self) -> &[f64] {
        &self.operator_reward
    }

    /// Swaps in a new operator map; visited gating is unaffected.
    pub fn set_operator_reward(&mut self, map: Vec<f64>) -> Result<(), ModelError> {
        let rebuilt = Self::new(self.grid.clone(), self.config, self.grid.cell(self.start), map)?;
        *self = rebuilt;
        Ok(())
    }

    /// Number of neighborhood cells `M`; observation codes run over `0..=M`.
    pub fn n_codes(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    pub fn state_space_size(&self) -> StateSpaceSize {
        let n = self.n_cells() as u64;
        StateSpaceSize {
            battery_levels: self.config.b_max as u64,
            position_pairs: n * n,
            visited_bits: n,
        }
    }

    #[inline]
    pub fn next_cell(&self, cell: usize, action: Action) -> usize {
        self.moves[cell * 5 + action.index()] as usize
    }

    #[inline]
    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let n = self.grid.n_cols;
        (a / n).abs_diff(b / n) + (a % n).abs_diff(b % n)
    }

    #[inline]
    pub fn home_distance(&self, cell: usize) -> u32 {
        self.home_distance[cell]
    }

    pub fn initial_state(&self, target: usize) -> SearchState {
        let mut visited = Visited::new(self.n_cells());
        visited.insert(self.start);
        SearchState {
            robot: self.start,
            target,
            battery: self.config.b_max,
            visited,
        }
    }

    /// Battery exhaustion under the return-to-start budget.
    #[inline]
    pub fn battery_exhausted(&self, robot: usize, battery: u32) -> bool {
        battery <= self.config.b_cost * self.home_distance[robot]
    }

    #[inline]
    pub fn is_terminal(&self, s: &SearchState) -> bool {
        s.robot == s.target || self.battery_exhausted(s.robot, s.battery)
    }

    /// Reward for entering `next` from a state whose visited set is `visited`.
    #[inline]
    pub fn reward(&self, visited: &Visited, next: usize, target: usize) -> f64 {
        let mut r = self.config.r_time;
        if next == target {
            r += self.config.r_target;
        }
        if !visited.contains(next) {
            r += self.operator_reward[next];
        }
        r
    }

    /// Applies `action` in place and returns the reward.
    pub fn step(&self, s: &mut SearchState, action: Action) -> Step {
        let next = self.next_cell(s.robot, action);
        let fresh = !s.visited.contains(next);
        let reward = self.reward(&s.visited, next, s.target);
        s.robot = next;
        s.battery = s.battery.saturating_sub(self.config.b_cost);
        s.visited.insert(next);
        Step {
            reward,
            operator_reward: if fresh { self.operator_reward[next] } else { 0.0 },
            found: next == s.target,
        }
    }

    pub fn transition(&self, s: &SearchState, action: Action) -> SearchState {
        let mut next = s.clone();
        self.step(&mut next, action);
        next
    }

    /// Code of the neighborhood cell at `cell` seen from `robot`, if it is in range.
    #[inline]
    pub fn code_of(&self, robot: usize, cell: usize) -> Option<usize> {
        let n = self.grid.n_cols as i64;
        let dr = (cell as i64 / n) - (robot as i64 / n);
        let dc = (cell as i64 % n) - (robot as i64 % n);
        self.code_of_offset(dr, dc)
    }

    #[inline]
    fn code_of_offset(&self, dr: i64, dc: i64) -> Option<usize> {
        let d = self.config.d_obs as i64;
        if dr.abs() + dc.abs() > d {
            return None;
        }
        let side = 2 * d + 1;
        Some(self.code_table[((dr + d) * side + dc + d) as usize] as usize)
    }

    /// Cell reported by a positive observation code, if it lies on the grid.
    pub fn cell_of_code(&self, robot: usize, code: usize) -> Option<usize> {
        if code == 0 || code > self.offsets.len() {
            return None;
        }
        let (dr, dc) = self.offsets[code - 1];
        let n = self.grid.n_cols as i64;
        let (r, c) = (robot as i64 / n + dr, robot as i64 % n + dc);
        if r < 0 || c < 0 || r >= self.grid.n_rows as i64 || c >= n {
            None
        } else {
            Some((r * n + c) as usize)
        }
    }

    /// The two cells beside the target, perpendicular to the robot-to-target axis.
    /// Cells off the grid are `None`.
    fn proximal_cells(&self, robot: usize, target: usize) -> [Option<usize>; 2] {
        let n = self.grid.n_cols as i64;
        let (rr, rc) = (robot as i64 / n, robot as i64 % n);
        let (tr, tc) = (target as i64 / n, target as i64 % n);
        let (dr, dc) = (tr - rr, tc - rc);
        let side = if dr.abs() > dc.abs() { [(0, 1), (0, -1)] } else { [(1, 0), (-1, 0)] };
        side.map(|(or, oc)| {
            let (r, c) = (tr + or, tc + oc);
            if r < 0 || c < 0 || r >= self.grid.n_rows as i64 || c >= n {
                None
            } else {
                Some((r * n + c) as usize)
            }
        })
    }

    /// Full distribution over codes `0..=M` for the robot at `robot`.
    pub fn observation_distribution(&self, robot: usize, target: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n_codes() + 1];
        let Some(code) = self.code_of(robot, target) else {
            p[0] = 1.0;
            return p;
        };
        p[code] += self.config.z_true;
        p[0] += self.config.z_neg();
        for prox in self.proximal_cells(robot, target) {
            match prox.and_then(|c| self.code_of(robot, c)) {
                Some(k) => p[k] += self.config.z_prox,
                None => p[0] += self.config.z_prox,
            }
        }
        p
    }

    /// `P(code | robot, target)` without building the full vector.
    #[inline]
    pub fn likelihood(&self, robot: usize, target: usize, code: usize) -> f64 {
        let Some(true_code) = self.code_of(robot, target) else {
            return if code == 0 { 1.0 } else { 0.0 };
        };
        let mut p = 0.0;
        if code == true_code {
            p += self.config.z_true;
        }
        if code == 0 {
            p += self.config.z_neg();
        }
        for prox in self.proximal_cells(robot, target) {
            let k = prox.and_then(|c| self.code_of(robot, c)).unwrap_or(0);
            if k == code {
                p += self.config.z_prox;
            }
        }
        p
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, robot: usize, target: usize, rng: &mut R) -> usize {
        let Some(true_code) = self.code_of(robot, target) else {
            return 0;
        };
        let u: f64 = rng.random();
        if u < self.config.z_true {
            return true_code;
        }
        let mut acc = self.config.z_true;
        for prox in self.proximal_cells(robot, target) {
            acc += self.config.z_prox;
            if u < acc {
                return prox.and_then(|c| self.code_of(robot, c)).unwrap_or(0);
            }
        }
        0
    }
}
