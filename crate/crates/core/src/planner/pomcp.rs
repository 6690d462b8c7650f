//! Monte-Carlo tree search over action/observation histories with a particle
//! root belief (POMCP). The tree is rebuilt for every decision.

use super::belief::Belief;
use super::rollout::RolloutValueTable;
use crate::pomdp::{Action, SearchModel, Visited};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("belief has no particles; reinvigorate before planning")]
    EmptyBelief,
    #[error("state is terminal")]
    Terminal,
    #[error("invalid solver setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_simulations: usize,
    pub max_depth: usize,
    pub ucb_exploration: f64,
    pub seed: u64,
    pub reinvigoration_fraction: f64,
    /// Root-parallel trees; each gets its own seeded stream.
    pub workers: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_simulations: 1000,
            max_depth: 50,
            ucb_exploration: 100.0,
            seed: 0,
            reinvigoration_fraction: 0.1,
            workers: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_simulations == 0 {
            return Err(PlanError::Config("n_simulations must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(PlanError::Config("max_depth must be at least 1".into()));
        }
        if !(self.ucb_exploration > 0.0) {
            return Err(PlanError::Config("ucb_exploration must be positive".into()));
        }
        if self.workers == 0 {
            return Err(PlanError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fully known part of the state at decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownState {
    pub robot: usize,
    pub battery: u32,
    pub visited: Visited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub visit_counts: [u32; 5],
    pub values: [f64; 5],
}

const NONE: u32 = u32::MAX;

#[derive(Default)]
struct HistoryNode {
    visits: u32,
    actions: [u32; 5],
}

struct ActionNode {
    visits: u32,
    value: f64,
    children: Vec<(u16, u32)>,
}

struct Tree {
    histories: Vec<HistoryNode>,
    actions: Vec<ActionNode>,
}

impl Tree {
    fn new() -> Self {
        Self {
            histories: vec![HistoryNode {
                visits: 0,
                actions: [NONE; 5],
            }],
            actions: Vec::new(),
        }
    }

    fn new_history(&mut self) -> u32 {
        self.histories.push(HistoryNode {
            visits: 0,
            actions: [NONE; 5],
        });
        (self.histories.len() - 1) as u32
    }
}

struct Sim {
    robot: usize,
    target: usize,
    battery: u32,
    visited: Visited,
}

pub struct Pomcp<'a> {
    model: &'a SearchModel,
    table: &'a RolloutValueTable,
    config: SolverConfig,
}

impl<'a> Pomcp<'a> {
    pub fn new(model: &'a SearchModel, table: &'a RolloutValueTable, config: SolverConfig) -> Result<Self, PlanError> {
        config.validate()?;
        Ok(Self { model, table, config })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Chooses the most visited root action; ties go to the lowest action index.
    pub fn plan(&self, belief: &Belief, known: &KnownState, seed: u64) -> Result<Decision, PlanError> {
        if belief.is_empty() {
            return Err(PlanError::EmptyBelief);
        }
        if self.model.battery_exhausted(known.robot, known.battery) {
            return Err(PlanError::Terminal);
        }
        let workers = self.config.workers.min(self.config.n_simulations);
        let share = |w: usize| self.config.n_simulations / workers + usize::from(w < self.config.n_simulations % workers);
        let roots: Vec<([u32; 5], [f64; 5])> = if workers == 1 {
            vec![self.search(belief, known, seed, 0, share(0))]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| scope.spawn(move || self.search(belief, known, seed, w as u64, share(w))))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("search worker panicked")).collect()
            })
        };
        let mut visit_counts = [0u32; 5];
        let mut sums = [0.0f64; 5];
        for (counts, values) in &roots {
            for a in 0..5 {
                visit_counts[a] += counts[a];
                sums[a] += values[a] * counts[a] as f64;
            }
        }
        let mut values = [0.0; 5];
        for a in 0..5 {
            if visit_counts[a] > 0 {
                values[a] = sums[a] / visit_counts[a] as f64;
            }
        }
        let mut best = 0;
        for a in 1..5 {
            if visit_counts[a] > visit_counts[best] {
                best = a;
            }
        }
        Ok(Decision {
            action: Action::ALL[best],
            visit_counts,
            values,
        })
    }

    fn search(&self, belief: &Belief, known: &KnownState, seed: u64, stream: u64, n_sims: usize) -> ([u32; 5], [f64; 5]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut tree = Tree::new();
        for _ in 0..n_sims {
            let mut sim = Sim {
                robot: known.robot,
                target: belief.sample(&mut rng),
                battery: known.battery,
                visited: known.visited.clone(),
            };
            self.simulate(&mut tree, 0, &mut sim, 0, &mut rng);
        }
        let root = &tree.histories[0];
        let mut counts = [0u32; 5];
        let mut values = [0.0; 5];
        for a in 0..5 {
            let idx = root.actions[a];
            if idx != NONE {
                counts[a] = tree.actions[idx as usize].visits;
                values[a] = tree.actions[idx as usize].value;
            }
        }
        (counts, values)
    }

    fn select(&self, tree: &Tree, node: u32) -> usize {
        let h = &tree.histories[node as usize];
        if let Some(a) = (0..5).find(|&a| h.actions[a] == NONE || tree.actions[h.actions[a] as usize].visits == 0) {
            return a;
        }
        let log_n = (h.visits.max(1) as f64).ln();
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..5 {
            let an = &tree.actions[h.actions[a] as usize];
            let score = an.value + self.config.ucb_exploration * (log_n / an.visits as f64).sqrt();
            if score > best.0 {
                best = (score, a);
            }
        }
        best.1
    }

    /// Applies an action to the simulated state; returns (reward, terminal).
    #[inline]
    fn advance(&self, sim: &mut Sim, action: Action) -> (f64, bool) {
        let cfg = self.model.config();
        let next = self.model.next_cell(sim.robot, action);
        let reward = self.model.reward(&sim.visited, next, sim.target);
        sim.visited.insert(next);
        sim.robot = next;
        sim.battery = sim.battery.saturating_sub(cfg.b_cost);
        let terminal = next == sim.target || self.model.battery_exhausted(next, sim.battery);
        (reward, terminal)
    }

    fn simulate<R: Rng>(&self, tree: &mut Tree, node: u32, sim: &mut Sim, depth: usize, rng: &mut R) -> f64 {
        if depth >= self.config.max_depth {
            return 0.0;
        }
        let a = self.select(tree, node);
        let mut act_idx = tree.histories[node as usize].actions[a];
        if act_idx == NONE {
            tree.actions.push(ActionNode {
                visits: 0,
                value: 0.0,
                children: Vec::new(),
            });
            act_idx = (tree.actions.len() - 1) as u32;
            tree.histories[node as usize].actions[a] = act_idx;
        }
        let (reward, terminal) = self.advance(sim, Action::ALL[a]);
        let total = if terminal {
            reward
        } else {
            let code = self.model.sample_observation(sim.robot, sim.target, rng) as u16;
            let existing = tree.actions[act_idx as usize]
                .children
                .iter()
                .find(|(c, _)| *c == code)
                .map(|&(_, h)| h);
            let gamma = self.model.config().gamma;
            match existing {
                Some(child) => reward + gamma * self.simulate(tree, child, sim, depth + 1, rng),
                None => {
                    let child = tree.new_history();
                    tree.actions[act_idx as usize].children.push((code, child));
                    tree.histories[child as usize].visits += 1;
                    reward + gamma * self.rollout(sim, depth + 1)
                }
            }
        };
        let h = &mut tree.histories[node as usize];
        h.visits += 1;
        let an = &mut tree.actions[act_idx as usize];
        an.visits += 1;
        an.value += (total - an.value) / an.visits as f64;
        total
    }

    /// Greedy abstraction policy toward the sampled target, scored with the full reward.
    fn rollout(&self, sim: &mut Sim, mut depth: usize) -> f64 {
        let gamma = self.model.config().gamma;
        let mut total = 0.0;
        let mut discount = 1.0;
        while depth < self.config.max_depth {
            let a = self.table.greedy_action(self.model, sim.target, sim.robot, sim.battery);
            let (reward, terminal) = self.advance(sim, a);
            total += discount * reward;
            if terminal {
                break;
            }
            discount *= gamma;
            depth += 1;
        }
        total
    }
}
