//! Value iteration on the observation-free abstraction used by rollouts.
//!
//! The abstraction keeps only the robot cell, a fixed target and a bucketed
//! battery. Each step drops one bucket with probability `b_cost / bucket_size`,
//! so the expected battery drain matches the real model. Reaching the target
//! is terminal with value `r_target`; running out of return budget is terminal
//! with value 0. Operator rewards and the visited set are ignored here.

use crate::pomdp::{Action, SearchModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error(
        "rollout table needs {needed} bytes but the budget is {budget}; use a coarser battery bucket (currently {bucket_size} steps)"
    )]
    MemoryBudget {
        needed: usize,
        budget: usize,
        bucket_size: u32,
    },
    #[error("bucket size must be at least 1")]
    BucketSize,
    #[error("value iteration did not converge (residual {residual:e} after {sweeps} sweeps)")]
    NotConverged { residual: f64, sweeps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub bucket_size: u32,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub memory_budget_bytes: usize,
    /// Threads used to solve targets in parallel; 0 means all available cores.
    pub threads: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            bucket_size: 10,
            tolerance: 1e-6,
            max_sweeps: 100_000,
            memory_budget_bytes: 1 << 30,
            threads: 0,
        }
    }
}

/// Values indexed by (target, battery bucket, robot cell).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutValueTable {
    n_cells: usize,
    n_buckets: usize,
    bucket_size: u32,
    values: Vec<f32>,
    residual: f64,
}

/// Read-only view of the quantities the abstraction needs from the model.
struct Abstraction<'a> {
    model: &'a SearchModel,
    bucket_size: u32,
    drop: f64,
    gamma: f64,
    r_time: f64,
    r_target: f64,
}

impl Abstraction<'_> {
    fn exhausted(&self, bucket: usize, cell: usize) -> bool {
        self.model.battery_exhausted(cell, bucket as u32 * self.bucket_size)
    }

    /// Solves one target; `out` holds `n_buckets * n_cells` values.
    fn solve_target(&self, target: usize, n_buckets: usize, config: &RolloutConfig, out: &mut [f32]) -> Result<f64, RolloutError> {
        let n = self.model.n_cells();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&c| (self.model.manhattan(c, target), c));
        let mut below = vec![0.0f64; n];
        let mut current = vec![0.0f64; n];
        let mut worst: f64 = 0.0;
        for b in 0..n_buckets {
            let fixed: Vec<Option<f64>> = (0..n)
                .map(|c| {
                    if c == target {
                        Some(self.r_target)
                    } else if self.exhausted(b, c) {
                        Some(0.0)
                    } else {
                        None
                    }
                })
                .collect();
            for c in 0..n {
                current[c] = fixed[c].unwrap_or(below[c]);
            }
            let mut sweeps = 0;
            loop {
                let mut delta: f64 = 0.0;
                for &c in &order {
                    if fixed[c].is_some() {
                        continue;
                    }
                    let mut best = f64::NEG_INFINITY;
                    for a in Action::ALL {
                        let next = self.model.next_cell(c, a);
                        let cont = self.drop * below[next] + (1.0 - self.drop) * current[next];
                        best = best.max(self.r_time + self.gamma * cont);
                    }
                    delta = delta.max((best - current[c]).abs());
                    current[c] = best;
                }
                sweeps += 1;
                if delta < config.tolerance {
                    worst = worst.max(delta);
                    break;
                }
                if sweeps >= config.max_sweeps {
                    return Err(RolloutError::NotConverged { residual: delta, sweeps });
                }
            }
            for c in 0..n {
                out[b * n + c] = current[c] as f32;
            }
            std::mem::swap(&mut below, &mut current);
        }
        Ok(worst)
    }
}

impl RolloutValueTable {
    pub fn bytes_needed(n_cells: usize, b_max: u32, bucket_size: u32) -> usize {
        let n_buckets = (b_max / bucket_size.max(1)) as usize + 1;
        n_cells * n_cells * n_buckets * std::mem::size_of::<f32>()
    }

    /// Solves the abstraction for every target cell.
    pub fn solve(model: &SearchModel, config: &RolloutConfig) -> Result<Self, RolloutError> {
        if config.bucket_size == 0 {
            return Err(RolloutError::BucketSize);
        }
        let cfg = model.config();
        let n = model.n_cells();
        let needed = Self::bytes_needed(n, cfg.b_max, config.bucket_size);
        if needed > config.memory_budget_bytes {
            return Err(RolloutError::MemoryBudget {
                needed,
                budget: config.memory_budget_bytes,
                bucket_size: config.bucket_size,
            });
        }
        let n_buckets = (cfg.b_max / config.bucket_size) as usize + 1;
        let abs = Abstraction {
            model,
            bucket_size: config.bucket_size,
            drop: (cfg.b_cost as f64 / config.bucket_size as f64).min(1.0),
            gamma: cfg.gamma,
            r_time: cfg.r_time,
            r_target: cfg.r_target,
        };
        let block = n_buckets * n;
        let mut values = vec![0.0f32; n * block];
        let threads = match config.threads {
            0 => std::thread::available_parallelism().map_or(1, |p| p.get()),
            t => t,
        }
        .min(n)
        .max(1);
        let per_thread = n.div_ceil(threads);
        let residual = std::thread::scope(|scope| {
            let handles: Vec<_> = values
                .chunks_mut(per_thread * block)
                .enumerate()
                .map(|(chunk, slab)| {
                    let abs = &abs;
                    scope.spawn(move || -> Result<f64, RolloutError> {
                        let mut worst: f64 = 0.0;
                        for (i, out) in slab.chunks_mut(block).enumerate() {
                            let target = chunk * per_thread + i;
                            worst = worst.max(abs.solve_target(target, n_buckets, config, out)?);
                        }
                        Ok(worst)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rollout worker panicked"))
                .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))
        })?;
        Ok(Self {
            n_cells: n,
            n_buckets,
            bucket_size: config.bucket_size,
            values,
            residual,
        })
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn bucket_size(&self) -> u32 {
        self.bucket_size
    }

    pub fn bucket(&self, battery: u32) -> usize {
        ((battery / self.bucket_size) as usize).min(self.n_buckets - 1)
    }

    #[inline]
    pub fn value(&self, target: usize, bucket: usize, robot: usize) -> f64 {
        self.values[(target * self.n_buckets + bucket) * self.n_cells + robot] as f64
    }

    /// Greedy action under the abstraction; ties go to the lowest action index.
    pub fn greedy_action(&self, model: &SearchModel, target: usize, robot: usize, battery: u32) -> Action {
        let b = self.bucket(battery);
        let cfg = model.config();
        let drop = (cfg.b_cost as f64 / self.bucket_size as f64).min(1.0);
        let mut best = (f64::NEG_INFINITY, Action::Stay);
        for a in Action::ALL {
            let next = model.next_cell(robot, a);
            let below = if b == 0 { 0.0 } else { self.value(target, b - 1, next) };
            let here = self.value(target, b, next);
            let q = drop * below + (1.0 - drop) * here;
            if q > best.0 {
                best = (q, a);
            }
        }
        best.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{Cell, GridSpec};
    use crate::geometry::Vec2;
    use crate::pomdp::PomdpConfig;

    fn model(rows: usize, cols: usize, b_max: u32) -> SearchModel {
        let grid = GridSpec::new(rows, cols, 1.0, Vec2::default()).unwrap();
        let cfg = PomdpConfig {
            b_max,
            ..PomdpConfig::default()
        };
        SearchModel::new(grid, cfg, Cell::new(0, 0), vec![0.0; rows * cols]).unwrap()
    }

    #[test]
    fn one_step_to_target() {
        let m = model(1, 2, 100);
        let t = RolloutValueTable::solve(&m, &RolloutConfig::default()).unwrap();
        let b = t.bucket(100);
        assert!((t.value(1, b, 0) - 949.0).abs() < 1e-3);
        assert_eq!(t.greedy_action(&m, 1, 0, 100), Action::Right);
        assert!(t.residual() < 1e-6);
    }

    /// Independent Bellman residual over every (target, bucket, cell).
    #[test]
    fn bellman_residual_below_tolerance() {
        let m = model(4, 5, 40);
        let cfg = RolloutConfig {
            bucket_size: 4,
            threads: 2,
            ..RolloutConfig::default()
        };
        let t = RolloutValueTable::solve(&m, &cfg).unwrap();
        let drop = 0.25;
        let mut worst: f64 = 0.0;
        for target in 0..20 {
            for b in 0..t.n_buckets() {
                for c in 0..20 {
                    if c == target || m.battery_exhausted(c, b as u32 * 4) {
                        continue;
                    }
                    let backup = Action::ALL
                        .iter()
                        .map(|&a| {
                            let n = m.next_cell(c, a);
                            let below = if b == 0 { 0.0 } else { t.value(target, b - 1, n) };
                            -1.0 + 0.95 * (drop * below + (1.0 - drop) * t.value(target, b, n))
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.max((backup - t.value(target, b, c)).abs());
                }
            }
        }
        // f32 storage adds rounding on values of order 1e3
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn greedy_policy_closes_distance_with_ample_battery() {
        let m = model(4, 4, 200);
        let t = RolloutValueTable::solve(&m, &RolloutConfig::default()).unwrap();
        for target in 0..16 {
            for robot in 0..16 {
                if robot == target {
                    continue;
                }
                let a = t.greedy_action(&m, target, robot, 200);
                let next = m.next_cell(robot, a);
                assert!(m.manhattan(next, target) < m.manhattan(robot, target));
            }
        }
    }

    #[test]
    fn memory_budget_names_bucketing() {
        let m = model(10, 10, 300);
        let cfg = RolloutConfig {
            memory_budget_bytes: 1000,
            ..RolloutConfig::default()
        };
        let err = RolloutValueTable::solve(&m, &cfg).unwrap_err();
        assert!(err.to_string().contains("coarser battery bucket"));
    }
}
