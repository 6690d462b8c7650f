//! Episode execution for both agents and paired Monte Carlo evaluation.

use crate::baseline::{BaselineAgent, BaselineRoute};
use crate::geogrid::Cell;
use crate::metrics::mean_sem;
use crate::planner::{Belief, KnownState, PlanError, Pomcp, RolloutValueTable, SolverConfig};
use crate::pomdp::{Action, ModelError, SearchModel, SearchState};
use crate::synth::TruthModel;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Pomcp,
    Baseline,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Pomcp => "pomcp",
            AgentKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pomcp" => Ok(AgentKind::Pomcp),
            "baseline" => Ok(AgentKind::Baseline),
            other => Err(format!("unknown agent `{other}` (expected pomcp or baseline)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Found,
    BatteryOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: Action,
    pub robot: usize,
    pub battery: u32,
    pub observation: Option<usize>,
    pub reward: f64,
    pub cumulative_reward: f64,
    /// Most likely target cell and its particle mass (tree-search agent only).
    pub belief_peak: Option<(usize, f64)>,
    pub root_visits: Option<[u32; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub agent: AgentKind,
    pub seed: u64,
    pub start: usize,
    pub target: usize,
    pub gamma: f64,
    pub records: Vec<StepRecord>,
    pub outcome: Option<Outcome>,
    pub discounted_return: f64,
}

impl EpisodeLog {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    /// Discounted return over steps used; a zero-step episode divides by one.
    pub fn reward_per_timestep(&self) -> f64 {
        self.discounted_return / self.steps().max(1) as f64
    }

    /// Recomputes the discounted return from the per-step rewards.
    pub fn replayed_return(&self) -> f64 {
        self.records
            .iter()
            .enumerate()
            .map(|(t, r)| self.gamma.powi(t as i32) * r.reward)
            .sum()
    }
}

#[derive(Debug, Clone)]
enum AgentState {
    Pomcp {
        table: Arc<RolloutValueTable>,
        solver: SolverConfig,
        belief: Belief,
    },
    Baseline(BaselineAgent),
}

/// A live episode that can be advanced one step at a time.
#[derive(Debug, Clone)]
pub struct Episode {
    model: Arc<SearchModel>,
    state: SearchState,
    agent: AgentState,
    rng: ChaCha8Rng,
    log: EpisodeLog,
}

impl Episode {
    pub fn pomcp(model: Arc<SearchModel>, table: Arc<RolloutValueTable>, solver: SolverConfig, target: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_particles = model.config().n_particles.max(1);
        let belief = Belief::uniform_with(model.n_cells(), n_particles, &mut rng);
        Self::with_agent(model, AgentState::Pomcp { table, solver, belief }, AgentKind::Pomcp, target, seed, rng)
    }

    pub fn baseline(model: Arc<SearchModel>, route: BaselineRoute, target: usize, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_agent(model, AgentState::Baseline(BaselineAgent::new(route)), AgentKind::Baseline, target, seed, rng)
    }

    fn with_agent(model: Arc<SearchModel>, agent: AgentState, kind: AgentKind, target: usize, seed: u64, rng: ChaCha8Rng) -> Self {
        let state = model.initial_state(target);
        let mut log = EpisodeLog {
            agent: kind,
            seed,
            start: model.start(),
            target,
            gamma: model.config().gamma,
            records: Vec::new(),
            outcome: None,
            discounted_return: 0.0,
        };
        if model.is_terminal(&state) {
            log.outcome = Some(if state.robot == target { Outcome::Found } else { Outcome::BatteryOut });
        }
        Self {
            model,
            state,
            agent,
            rng,
            log,
        }
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn model(&self) -> &SearchModel {
        &self.model
    }

    pub fn is_done(&self) -> bool {
        self.log.outcome.is_some()
    }

    pub fn belief(&self) -> Option<&Belief> {
        match &self.agent {
            AgentState::Pomcp { belief, .. } => Some(belief),
            AgentState::Baseline(_) => None,
        }
    }

    /// Swaps the operator map; cells already visited stay collected.
    pub fn set_operator_reward(&mut self, map: Vec<f64>) -> Result<(), ModelError> {
        let mut model = (*self.model).clone();
        model.set_operator_reward(map)?;
        self.model = Arc::new(model);
        Ok(())
    }

    /// Advances one step; returns `None` once the episode has ended.
    pub fn step(&mut self) -> Result<Option<&StepRecord>, PlanError> {
        if self.is_done() {
            return Ok(None);
        }
        let plan_seed = self.rng.next_u64();
        let (action, root_visits) = match &mut self.agent {
            AgentState::Pomcp { table, solver, belief } => {
                let planner = Pomcp::new(&self.model, table, *solver)?;
                let known = KnownState {
                    robot: self.state.robot,
                    battery: self.state.battery,
                    visited: self.state.visited.clone(),
                };
                let d = planner.plan(belief, &known, plan_seed)?;
                (d.action, Some(d.visit_counts))
            }
            AgentState::Baseline(agent) => (agent.act(self.model.grid(), self.state.robot), None),
        };
        let step = self.model.step(&mut self.state, action);
        let t = self.log.records.len();
        self.log.discounted_return += self.model.config().gamma.powi(t as i32) * step.reward;
        let terminal = self.model.is_terminal(&self.state);
        let mut observation = None;
        if !terminal {
            let code = self.model.sample_observation(self.state.robot, self.state.target, &mut self.rng);
            observation = Some(code);
            match &mut self.agent {
                AgentState::Pomcp { solver, belief, .. } => {
                    *belief = belief.update(&self.model, self.state.robot, code, solver.reinvigoration_fraction, &mut self.rng);
                }
                AgentState::Baseline(agent) => agent.observe(&self.model, self.state.robot, code),
            }
        } else {
            self.log.outcome = Some(if step.found { Outcome::Found } else { Outcome::BatteryOut });
        }
        let belief_peak = self.belief().map(|b| b.mode());
        self.log.records.push(StepRecord {
            t,
            action,
            robot: self.state.robot,
            battery: self.state.battery,
            observation,
            reward: step.reward,
            cumulative_reward: self.log.records.last().map_or(0.0, |r| r.cumulative_reward) + step.reward,
            belief_peak,
            root_visits,
        });
        Ok(self.log.records.last())
    }

    pub fn run(mut self) -> Result<EpisodeLog, PlanError> {
        while self.step()?.is_some() {}
        Ok(self.log)
    }
}

/// Everything needed to run episodes from one start cell.
#[derive(Debug, Clone)]
pub struct StartSetup {
    pub start: Cell,
    pub model: Arc<SearchModel>,
    pub table: Option<Arc<RolloutValueTable>>,
    pub route: BaselineRoute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub runs_per_start: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub agent: AgentKind,
    pub start_row: usize,
    pub start_col: usize,
    pub run: usize,
    pub seed: u64,
    pub target: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub discounted_return: f64,
    pub reward_per_timestep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent: AgentKind,
    pub runs: usize,
    pub found: usize,
    pub localization_ratio: f64,
    pub reward_per_timestep_mean: f64,
    pub reward_per_timestep_sem: f64,
    pub mean_steps: f64,
}

impl AgentSummary {
    pub fn from_records(agent: AgentKind, records: &[RunRecord]) -> Self {
        let runs = records.len();
        let found = records.iter().filter(|r| r.outcome == Outcome::Found).count();
        let rpt: Vec<f64> = records.iter().map(|r| r.reward_per_timestep).collect();
        let (mean, sem) = mean_sem(&rpt);
        Self {
            agent,
            runs,
            found,
            localization_ratio: if runs == 0 { 0.0 } else { found as f64 / runs as f64 },
            reward_per_timestep_mean: mean,
            reward_per_timestep_sem: sem,
            mean_steps: records.iter().map(|r| r.steps as f64).sum::<f64>() / runs.max(1) as f64,
        }
    }
}

/// Target and episode seed for one (start, run) pair; both agents share them.
pub fn draw_run(truth: &TruthModel, seed: u64, start_index: usize, run: usize) -> (usize, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((start_index as u64) << 32) | run as u64);
    let target = truth.sample(&mut rng);
    (target, rng.random())
}

pub fn run_one(setup: &StartSetup, agent: AgentKind, solver: SolverConfig, target: usize, seed: u64) -> Result<EpisodeLog, PlanError> {
    let episode = match agent {
        AgentKind::Pomcp => {
            let table = setup
                .table
                .clone()
                .ok_or_else(|| PlanError::Config("no rollout table for this start".into()))?;
            Episode::pomcp(setup.model.clone(), table, solver, target, seed)
        }
        AgentKind::Baseline => Episode::baseline(setup.model.clone(), setup.route.clone(), target, seed),
    };
    episode.run()
}

/// Runs `runs_per_start` paired episodes from every start, in parallel.
pub fn monte_carlo_eval(
    setups: &[StartSetup],
    agent: AgentKind,
    solver: SolverConfig,
    truth: &TruthModel,
    config: &EvalConfig,
) -> Result<(Vec<RunRecord>, AgentSummary), PlanError> {
    let jobs: Vec<(usize, usize)> = (0..setups.len())
        .flat_map(|s| (0..config.runs_per_start).map(move |r| (s, r)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(s, run)| {
            let (target, seed) = draw_run(truth, config.seed, s, run);
            let log = run_one(&setups[s], agent, solver, target, seed)?;
            Ok(RunRecord {
                agent,
                start_row: setups[s].start.row,
                start_col: setups[s].start.col,
                run,
                seed,
                target,
                outcome: log.outcome.expect("finished episode has an outcome"),
                steps: log.steps(),
                discounted_return: log.discounted_return,
                reward_per_timestep: log.reward_per_timestep(),
            })
        })
        .collect::<Result<_, PlanError>>()?;
    let summary = AgentSummary::from_records(agent, &records);
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::plan_baseline;
    use crate::geogrid::GridSpec;
    use crate::geometry::Vec2;
    use crate::planner::RolloutConfig;
    use crate::pomdp::PomdpConfig;

    fn setup(rows: usize, cols: usize, b_max: u32) -> StartSetup {
        let grid = GridSpec::new(rows, cols, 1.0, Vec2::default()).unwrap();
        let cfg = PomdpConfig {
            b_max,
            n_particles: 500,
            ..PomdpConfig::default()
        };
        let start = Cell::new(0, 0);
        let model = SearchModel::new(grid.clone(), cfg, start, vec![0.0; rows * cols]).unwrap();
        let table = RolloutValueTable::solve(&model, &RolloutConfig::default()).unwrap();
        StartSetup {
            start,
            route: plan_baseline(&grid, 0, &[], &[]),
            model: Arc::new(model),
            table: Some(Arc::new(table)),
        }
    }

    fn solver() -> SolverConfig {
        SolverConfig {
            n_simulations: 100,
            max_depth: 20,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn target_on_start_is_found_at_step_zero() {
        let s = setup(4, 4, 50);
        for agent in [AgentKind::Pomcp, AgentKind::Baseline] {
            let log = run_one(&s, agent, solver(), 0, 1).unwrap();
            assert_eq!(log.outcome, Some(Outcome::Found));
            assert_eq!(log.steps(), 0);
            assert_eq!(log.reward_per_timestep(), 0.0);
        }
    }

    #[test]
    fn short_battery_runs_out() {
        let s = setup(1, 12, 3);
        for agent in [AgentKind::Pomcp, AgentKind::Baseline] {
            let log = run_one(&s, agent, solver(), 10, 1).unwrap();
            assert_eq!(log.outcome, Some(Outcome::BatteryOut));
            assert!(log.steps() <= 3);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let s = setup(5, 5, 40);
        for agent in [AgentKind::Pomcp, AgentKind::Baseline] {
            let a = run_one(&s, agent, solver(), 18, 77).unwrap();
            let b = run_one(&s, agent, solver(), 18, 77).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.replayed_return().to_bits(), a.discounted_return.to_bits());
        }
    }

    #[test]
    fn episodes_end_within_battery() {
        let s = setup(6, 6, 30);
        let truth = TruthModel::uniform(36);
        let cfg = EvalConfig {
            runs_per_start: 10,
            seed: 4,
        };
        for agent in [AgentKind::Pomcp, AgentKind::Baseline] {
            let (records, summary) = monte_carlo_eval(std::slice::from_ref(&s), agent, solver(), &truth, &cfg).unwrap();
            assert_eq!(records.len(), 10);
            assert!(records.iter().all(|r| r.steps <= 30));
            assert!((0.0..=1.0).contains(&summary.localization_ratio));
        }
    }

    #[test]
    fn summary_statistics() {
        let rec = |outcome, rpt| RunRecord {
            agent: AgentKind::Baseline,
            start_row: 0,
            start_col: 0,
            run: 0,
            seed: 0,
            target: 0,
            outcome,
            steps: 1,
            discounted_return: rpt,
            reward_per_timestep: rpt,
        };
        let s = AgentSummary::from_records(AgentKind::Baseline, &[rec(Outcome::Found, 1.0), rec(Outcome::Found, 3.0)]);
        assert_eq!(s.localization_ratio, 1.0);
        assert_eq!(s.reward_per_timestep_mean, 2.0);
        assert_eq!(s.reward_per_timestep_sem, 1.0);
    }
}
