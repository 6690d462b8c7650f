//! One mission: a scenario, its current fit, and at most one live episode.

use searchgrid_core::baseline::plan_baseline;
use searchgrid_core::fusion::RewardMap;
use searchgrid_core::geogrid::{Cell, FeatureMatrix, GridSpec};
use searchgrid_core::planner::{PlanError, RolloutValueTable};
use searchgrid_core::pomdp::{Action, ModelError, SearchModel};
use searchgrid_core::raster::{plane_to_string, RasterManifest};
use searchgrid_core::scenario::{
    fuse_scenario, geographic_features, truth_model, CacheStatus, FusedScenario, ObservationInput, Scenario, ScenarioError,
    SketchInput, WaypointInput,
};
use searchgrid_core::sim::{draw_run, AgentKind, Episode, Outcome};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;
use tokio::sync::broadcast;

/// Cells listed in a frame's belief summary.
const BELIEF_TOP: usize = 5;
const FRAME_BUFFER: usize = 256;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("no episode has been started")]
    NoEpisode,
    #[error("an episode is already running; pause or reset it first")]
    EpisodeRunning,
    #[error("start cell ({row}, {col}) is outside the grid")]
    BadStart { row: usize, col: usize },
    #[error("bad request body: {0}")]
    Body(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("persisting session: {0}")]
    Persist(String),
}

/// Changes to the operator inputs. Absent fields leave the current value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputDelta {
    /// Replaces the priority set.
    pub priorities: Option<Vec<String>>,
    /// Added, or replacing a sketch of the same name.
    pub sketches: Vec<SketchInput>,
    pub observations: Vec<ObservationInput>,
    pub waypoints: WaypointInput,
}

impl InputDelta {
    pub fn apply(&self, scenario: &mut Scenario) {
        if let Some(p) = &self.priorities {
            scenario.inputs.priorities = p.clone();
        }
        for sketch in &self.sketches {
            match scenario.sketches.iter_mut().find(|s| s.name.eq_ignore_ascii_case(&sketch.name)) {
                Some(existing) => *existing = sketch.clone(),
                None => scenario.sketches.push(sketch.clone()),
            }
        }
        scenario.inputs.observations.extend(self.observations.iter().cloned());
        scenario.inputs.waypoints.visit.extend(self.waypoints.visit.iter().copied());
        scenario.inputs.waypoints.avoid.extend(self.waypoints.avoid.iter().copied());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub session: String,
    pub revision: u64,
    pub n_phi: usize,
    pub n_psi: usize,
    pub columns: Vec<String>,
    pub posterior_mean: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub n_visit: usize,
    pub n_avoid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub session: String,
    pub revision: u64,
    pub grid: GridSpec,
    pub feature_vocabulary: Vec<String>,
    pub columns: Vec<String>,
    pub starts: Vec<Cell>,
    pub cache: CacheStatus,
}

/// Reward map planes as CSV text (first line is the southern row) plus the fit manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRaster {
    pub session: String,
    pub revision: u64,
    pub manifest: RasterManifest,
    pub mean: String,
    pub variance: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeRequest {
    pub agent: Option<AgentKind>,
    pub seed: Option<u64>,
    pub start: Option<Cell>,
    /// Fixes the hidden target instead of drawing it from the scenario's truth density.
    pub target: Option<Cell>,
    /// Steps automatically at this interval until paused or finished.
    pub autoplay_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub agent: AgentKind,
    pub seed: u64,
    pub start: Cell,
    pub target: Cell,
    pub episode_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Start,
    Step,
    Pause,
    Reset,
}

impl std::str::FromStr for Command {
    type Err = SessionError;
    fn from_str(s: &str) -> Result<Self, SessionError> {
        match s {
            "start" => Ok(Command::Start),
            "step" => Ok(Command::Step),
            "pause" => Ok(Command::Pause),
            "reset" => Ok(Command::Reset),
            other => Err(SessionError::UnknownCommand(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameEvent {
    Status,
    Inputs,
    Start,
    Step,
    Pause,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSummary {
    pub entropy: f64,
    /// Most likely target cells with their particle mass, most likely first.
    pub top: Vec<(Cell, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub params: EpisodeParams,
    pub t: usize,
    pub robot: Cell,
    pub battery: u32,
    pub action: Option<Action>,
    pub observation: Option<usize>,
    pub cumulative_reward: f64,
    pub discounted_return: f64,
    pub belief: Option<BeliefSummary>,
    pub outcome: Option<Outcome>,
    pub terminal: bool,
    pub paused: bool,
}

/// One line of the telemetry stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session: String,
    pub seq: u64,
    pub revision: u64,
    pub event: FrameEvent,
    pub episode: Option<EpisodeStatus>,
}

struct LiveEpisode {
    params: EpisodeParams,
    episode: Episode,
    paused: bool,
}

pub struct MissionSession {
    id: String,
    scenario: Scenario,
    geographic: FeatureMatrix,
    cache: CacheStatus,
    fused: FusedScenario,
    revision: u64,
    tables: HashMap<Cell, Arc<RolloutValueTable>>,
    live: Option<LiveEpisode>,
    /// Bumped on every start, pause and reset so stale autoplay loops stop.
    generation: u64,
    seq: u64,
    last_frame: Option<Frame>,
    frames: broadcast::Sender<Frame>,
}

impl MissionSession {
    pub fn create(id: String, scenario: Scenario, cache_dir: Option<&Path>) -> Result<Self, SessionError> {
        Self::restore(id, scenario, 0, cache_dir)
    }

    /// Rebuilds a session at a known revision; the fit is recomputed from the inputs.
    pub fn restore(id: String, scenario: Scenario, revision: u64, cache_dir: Option<&Path>) -> Result<Self, SessionError> {
        scenario.validate()?;
        let (geographic, cache) = geographic_features(&scenario, cache_dir)?;
        let fused = fuse_scenario(&scenario, &geographic)?;
        let (frames, _) = broadcast::channel(FRAME_BUFFER);
        Ok(Self {
            id,
            scenario,
            geographic,
            cache,
            fused,
            revision,
            tables: HashMap::new(),
            live: None,
            generation: 0,
            seq: 0,
            last_frame: None,
            frames,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn cache_status(&self) -> CacheStatus {
        self.cache
    }

    pub fn fused(&self) -> &FusedScenario {
        &self.fused
    }

    pub fn reward_map(&self) -> &RewardMap {
        &self.fused.map
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Model the live episode currently plans against.
    pub fn live_model(&self) -> Option<&SearchModel> {
        self.live.as_ref().map(|l| l.episode.model())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Frame> {
        self.frames.subscribe()
    }

    pub fn summary(&self) -> FitSummary {
        let map = &self.fused.map;
        let post = &self.fused.posterior;
        FitSummary {
            session: self.id.clone(),
            revision: self.revision,
            n_phi: self.fused.features.n_phi(),
            n_psi: self.fused.features.n_psi(),
            columns: post.column_names.clone(),
            posterior_mean: post.mean.iter().copied().collect(),
            iterations: post.iterations,
            gradient_norm: post.gradient_norm,
            reward_min: map.mean.iter().copied().fold(f64::INFINITY, f64::min),
            reward_max: map.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_visit: self.fused.waypoints.visit.len(),
            n_avoid: self.fused.waypoints.avoid.len(),
        }
    }

    pub fn grid_info(&self) -> GridInfo {
        GridInfo {
            session: self.id.clone(),
            revision: self.revision,
            grid: self.scenario.grid.clone(),
            feature_vocabulary: self.scenario.feature_vocabulary.clone(),
            columns: self.fused.features.column_names(),
            starts: self.default_starts(),
            cache: self.cache,
        }
    }

    pub fn raster(&self) -> RewardRaster {
        let map = &self.fused.map;
        RewardRaster {
            session: self.id.clone(),
            revision: self.revision,
            manifest: RasterManifest::new(&self.scenario.id, &self.scenario.grid, &self.fused.posterior),
            mean: plane_to_string(&map.mean, map.n_cols),
            variance: plane_to_string(&map.variance, map.n_cols),
        }
    }

    /// Refits from scratch on the merged inputs. Nothing changes when the delta is rejected.
    pub fn submit_inputs(&mut self, delta: &InputDelta) -> Result<FitSummary, SessionError> {
        let mut next = self.scenario.clone();
        delta.apply(&mut next);
        next.validate()?;
        let fused = fuse_scenario(&next, &self.geographic)?;
        if let Some(live) = &mut self.live {
            live.episode.set_operator_reward(fused.map.mean.clone())?;
        }
        self.scenario = next;
        self.fused = fused;
        self.revision += 1;
        self.emit(FrameEvent::Inputs);
        Ok(self.summary())
    }

    /// Latest frame, or a fresh status frame when nothing has happened yet.
    pub fn current_frame(&mut self) -> Frame {
        match &self.last_frame {
            Some(f) if f.revision == self.revision => f.clone(),
            _ => self.emit(FrameEvent::Status),
        }
    }

    pub fn control(&mut self, command: Command, request: &EpisodeRequest) -> Result<Frame, SessionError> {
        match command {
            Command::Start => {
                if let Some(live) = &mut self.live {
                    if !live.episode.is_done() {
                        if !live.paused {
                            return Err(SessionError::EpisodeRunning);
                        }
                        live.paused = false;
                        self.generation += 1;
                        return Ok(self.emit(FrameEvent::Start));
                    }
                }
                let params = self.resolve(request)?;
                self.live = Some(LiveEpisode {
                    params,
                    episode: self.new_episode(&params)?,
                    paused: false,
                });
                self.generation += 1;
                Ok(self.emit(FrameEvent::Start))
            }
            Command::Step => {
                let live = self.live.as_mut().ok_or(SessionError::NoEpisode)?;
                live.episode.step()?;
                Ok(self.emit(FrameEvent::Step))
            }
            Command::Pause => {
                let live = self.live.as_mut().ok_or(SessionError::NoEpisode)?;
                live.paused = true;
                self.generation += 1;
                Ok(self.emit(FrameEvent::Pause))
            }
            Command::Reset => {
                let params = self.live.as_ref().ok_or(SessionError::NoEpisode)?.params;
                self.live = Some(LiveEpisode {
                    params,
                    episode: self.new_episode(&params)?,
                    paused: true,
                });
                self.generation += 1;
                Ok(self.emit(FrameEvent::Reset))
            }
        }
    }

    /// One autoplay step. Returns false once the loop for `generation` should stop.
    pub fn autoplay_tick(&mut self, generation: u64) -> Result<bool, SessionError> {
        if generation != self.generation {
            return Ok(false);
        }
        match &self.live {
            Some(live) if !live.paused && !live.episode.is_done() => {}
            _ => return Ok(false),
        }
        self.control(Command::Step, &EpisodeRequest::default())?;
        Ok(self.live.as_ref().is_some_and(|l| !l.episode.is_done()))
    }

    fn default_starts(&self) -> Vec<Cell> {
        if self.scenario.simulation.starts.is_empty() {
            vec![Cell::new(0, 0)]
        } else {
            self.scenario.simulation.starts.clone()
        }
    }

    fn resolve(&self, request: &EpisodeRequest) -> Result<EpisodeParams, SessionError> {
        let grid = &self.scenario.grid;
        let start = request.start.unwrap_or(self.default_starts()[0]);
        for cell in [Some(start), request.target].into_iter().flatten() {
            if !grid.contains(cell) {
                return Err(SessionError::BadStart { row: cell.row, col: cell.col });
            }
        }
        let seed = request.seed.unwrap_or(self.scenario.simulation.seed);
        let truth = truth_model(&self.scenario, &self.fused.features)?;
        let (drawn, episode_seed) = draw_run(&truth, seed, 0, 0);
        Ok(EpisodeParams {
            agent: request.agent.unwrap_or(AgentKind::Pomcp),
            seed,
            start,
            target: request.target.unwrap_or(grid.cell(drawn)),
            episode_seed,
        })
    }

    fn new_episode(&mut self, p: &EpisodeParams) -> Result<Episode, SessionError> {
        let grid = &self.scenario.grid;
        let model = Arc::new(SearchModel::new(grid.clone(), self.scenario.pomdp, p.start, self.fused.map.mean.clone())?);
        let target = grid.index(p.target);
        Ok(match p.agent {
            AgentKind::Pomcp => {
                let table = match self.tables.get(&p.start) {
                    Some(t) => t.clone(),
                    None => {
                        let t = Arc::new(RolloutValueTable::solve(&model, &self.scenario.planner.rollout).map_err(ScenarioError::from)?);
                        self.tables.insert(p.start, t.clone());
                        t
                    }
                };
                Episode::pomcp(model, table, self.scenario.planner.solver, target, p.episode_seed)
            }
            AgentKind::Baseline => {
                let sketches: Vec<_> = self.fused.positive_sketches.iter().collect();
                let route = plan_baseline(grid, grid.index(p.start), &self.fused.waypoints.visit, &sketches);
                Episode::baseline(model, route, target, p.episode_seed)
            }
        })
    }

    fn status(&self) -> Option<EpisodeStatus> {
        let live = self.live.as_ref()?;
        let grid = &self.scenario.grid;
        let ep = &live.episode;
        let log = ep.log();
        let last = log.records.last();
        let belief = ep.belief().map(|b| {
            let hist = b.histogram();
            let mut order: Vec<usize> = (0..hist.len()).filter(|&g| hist[g] > 0.0).collect();
            order.sort_by(|&a, &b| hist[b].total_cmp(&hist[a]).then(a.cmp(&b)));
            BeliefSummary {
                entropy: b.entropy(),
                top: order.into_iter().take(BELIEF_TOP).map(|g| (grid.cell(g), hist[g])).collect(),
            }
        });
        Some(EpisodeStatus {
            params: live.params,
            t: log.steps(),
            robot: grid.cell(ep.state().robot),
            battery: ep.state().battery,
            action: last.map(|r| r.action),
            observation: last.and_then(|r| r.observation),
            cumulative_reward: last.map_or(0.0, |r| r.cumulative_reward),
            discounted_return: log.discounted_return,
            belief,
            outcome: log.outcome,
            terminal: ep.is_done(),
            paused: live.paused,
        })
    }

    fn emit(&mut self, event: FrameEvent) -> Frame {
        self.seq += 1;
        let frame = Frame {
            session: self.id.clone(),
            seq: self.seq,
            revision: self.revision,
            event,
            episode: self.status(),
        };
        let _ = self.frames.send(frame.clone());
        self.last_frame = Some(frame.clone());
        frame
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use searchgrid_core::geometry::Vec2;
    use searchgrid_core::sketch::SemanticLabel;

    fn scenario() -> Scenario {
        Scenario::from_value(serde_json::json!({
            "id": "unit",
            "grid": {"n_rows": 6, "n_cols": 6, "resolution": 10.0},
            "layers": [{"feature_name": "trails", "geometries": [{"kind": "polyline", "coords": [[0.0, 25.0], [60.0, 25.0]]}]}],
            "pomdp": {"b_max": 30, "n_particles": 300},
            "planner": {"n_simulations": 60, "max_depth": 10}
        }))
        .unwrap()
    }

    #[test]
    fn rejected_delta_leaves_state_alone() {
        let mut s = MissionSession::create("a".into(), scenario(), None).unwrap();
        let before = s.reward_map().clone();
        let bad = InputDelta {
            observations: vec![ObservationInput {
                sketch: "nowhere".into(),
                label: SemanticLabel::Inside,
            }],
            ..InputDelta::default()
        };
        assert!(s.submit_inputs(&bad).is_err());
        assert_eq!(s.revision(), 0);
        assert_eq!(s.reward_map(), &before);
    }

    #[test]
    fn sketch_replaced_by_name() {
        let mut sc = scenario();
        let square = |x: f64| SketchInput {
            name: "Pond".into(),
            vertices: vec![Vec2::new(x, 10.0), Vec2::new(x + 20.0, 10.0), Vec2::new(x + 20.0, 30.0), Vec2::new(x, 30.0)],
        };
        InputDelta {
            sketches: vec![square(0.0)],
            ..InputDelta::default()
        }
        .apply(&mut sc);
        InputDelta {
            sketches: vec![SketchInput {
                name: "pond".into(),
                ..square(30.0)
            }],
            ..InputDelta::default()
        }
        .apply(&mut sc);
        assert_eq!(sc.sketches.len(), 1);
        assert_eq!(sc.sketches[0].vertices[0].x, 30.0);
    }

    #[test]
    fn autoplay_stops_on_pause_and_generation_change() {
        let mut s = MissionSession::create("a".into(), scenario(), None).unwrap();
        s.control(Command::Start, &EpisodeRequest::default()).unwrap();
        let g = s.generation();
        assert!(s.autoplay_tick(g).unwrap());
        assert!(!s.autoplay_tick(g + 1).unwrap());
        s.control(Command::Pause, &EpisodeRequest::default()).unwrap();
        assert!(!s.autoplay_tick(g).unwrap());
        let resumed = s.control(Command::Start, &EpisodeRequest::default()).unwrap();
        assert_eq!(resumed.episode.unwrap().t, 1);
    }

    #[test]
    fn live_episode_takes_new_map_and_keeps_visited() {
        let mut s = MissionSession::create("a".into(), scenario(), None).unwrap();
        s.control(Command::Start, &EpisodeRequest::default()).unwrap();
        for _ in 0..3 {
            s.control(Command::Step, &EpisodeRequest::default()).unwrap();
        }
        let visited = s.live.as_ref().unwrap().episode.state().visited.clone();
        s.submit_inputs(&InputDelta {
            priorities: Some(vec!["trails".into()]),
            ..InputDelta::default()
        })
        .unwrap();
        assert_eq!(s.live_model().unwrap().operator_reward(), s.reward_map().mean.as_slice());
        assert!(s.reward_map().mean.iter().any(|&r| r != 0.0));
        assert_eq!(s.live.as_ref().unwrap().episode.state().visited, visited);
    }

    #[test]
    fn frames_are_numbered() {
        let mut s = MissionSession::create("a".into(), scenario(), None).unwrap();
        let mut rx = s.subscribe();
        let f1 = s.control(Command::Start, &EpisodeRequest::default()).unwrap();
        let f2 = s.control(Command::Step, &EpisodeRequest::default()).unwrap();
        assert_eq!((f1.seq, f2.seq), (1, 2));
        assert_eq!(rx.try_recv().unwrap(), f1);
        assert_eq!(rx.try_recv().unwrap(), f2);
        assert_eq!(s.current_frame(), f2);
    }
}
