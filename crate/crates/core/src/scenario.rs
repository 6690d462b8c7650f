//! Scenario documents and the pipeline from document to reward map and
//! simulation setup.

use crate::baseline::plan_baseline;
use crate::fusion::{self, FusionError, OptimizerConfig, PriorConfig, RewardMap, WaypointSet, WeightPosterior};
use crate::geogrid::cache::{self, CacheError, CacheKey};
use crate::geogrid::{adjacency_features, Cell, FeatureMatrix, GeoError, GeoLayer, GridSpec, DEFAULT_VOCABULARY};
use crate::geometry::Vec2;
use crate::planner::{RolloutConfig, RolloutError, RolloutValueTable, SolverConfig};
use crate::pomdp::{ModelError, PomdpConfig, SearchModel};
use crate::sim::StartSetup;
use crate::sketch::{normalize_sketch, SemanticConfig, SemanticLabel, Sketch, SketchError, SketchModel};
use crate::synth::{feature_score, synth_truth_model, SynthError, TruthModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchInput {
    pub name: String,
    pub vertices: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationInput {
    pub sketch: String,
    pub label: SemanticLabel,
}

/// Waypoints in metric coordinates; each snaps to the cell containing it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaypointInput {
    pub visit: Vec<Vec2>,
    pub avoid: Vec<Vec2>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorInputs {
    pub priorities: Vec<String>,
    pub observations: Vec<ObservationInput>,
    pub waypoints: WaypointInput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerSection {
    #[serde(flatten)]
    pub solver: SolverConfig,
    #[serde(flatten)]
    pub rollout: RolloutConfig,
}

/// Target-location density: softmax of `concentration` times a weighted feature sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub features: BTreeMap<String, f64>,
    pub concentration: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            features: BTreeMap::new(),
            concentration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub starts: Vec<Cell>,
    pub truth: TruthSpec,
    pub runs_per_start: usize,
    pub seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            starts: Vec::new(),
            truth: TruthSpec::default(),
            runs_per_start: 100,
            seed: 0,
        }
    }
}

fn default_vocabulary() -> Vec<String> {
    DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub grid: GridSpec,
    #[serde(default = "default_vocabulary")]
    pub feature_vocabulary: Vec<String>,
    #[serde(default)]
    pub layers: Vec<GeoLayer>,
    #[serde(default)]
    pub sketches: Vec<SketchInput>,
    #[serde(default)]
    pub inputs: OperatorInputs,
    #[serde(default)]
    pub semantics: SemanticConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub pomdp: PomdpConfig,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

impl Scenario {
    /// Parses and validates a JSON document; errors carry the offending path.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| ScenarioError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Structural checks beyond the schema.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.id.trim().is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        self.grid.validate().map_err(|e| invalid("grid", e.to_string()))?;
        for (i, layer) in self.layers.iter().enumerate() {
            if !self.feature_vocabulary.contains(&layer.feature_name) {
                return Err(invalid(
                    format!("layers[{i}].feature_name"),
                    format!("`{}` is not in feature_vocabulary", layer.feature_name),
                ));
            }
            crate::geogrid::validate_layer(layer).map_err(|e| invalid(format!("layers[{i}]"), e.to_string()))?;
        }
        for (i, s) in self.sketches.iter().enumerate() {
            if self.sketches[..i].iter().any(|o| o.name.eq_ignore_ascii_case(&s.name)) {
                return Err(invalid(format!("sketches[{i}].name"), format!("duplicate sketch `{}`", s.name)));
            }
            normalize_sketch(&s.name, &s.vertices).map_err(|e| invalid(format!("sketches[{i}]"), e.to_string()))?;
        }
        for (i, o) in self.inputs.observations.iter().enumerate() {
            if self.sketch(&o.sketch).is_none() {
                return Err(invalid(
                    format!("inputs.observations[{i}].sketch"),
                    format!("unknown sketch `{}`", o.sketch),
                ));
            }
        }
        let columns = self.column_names();
        for (i, p) in self.inputs.priorities.iter().enumerate() {
            if fusion::resolve_priority(p, &columns).is_empty() {
                return Err(invalid(
                    format!("inputs.priorities[{i}]"),
                    format!("unknown feature `{p}`; valid names: {}", columns.join(", ")),
                ));
            }
        }
        self.waypoints().map_err(|e| invalid("inputs.waypoints", e.to_string()))?;
        self.pomdp.validate().map_err(|e| invalid("pomdp", e.to_string()))?;
        self.planner
            .solver
            .validate()
            .map_err(|e| invalid("planner", e.to_string()))?;
        for (i, c) in self.simulation.starts.iter().enumerate() {
            if !self.grid.contains(*c) {
                return Err(invalid(format!("simulation.starts[{i}]"), "start cell lies outside the grid"));
            }
        }
        for name in self.simulation.truth.features.keys() {
            if !columns.iter().any(|c| c == name) {
                return Err(invalid(
                    format!("simulation.truth.features.{name}"),
                    format!("unknown feature; valid names: {}", columns.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn sketch(&self, name: &str) -> Option<&SketchInput> {
        self.sketches.iter().find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Names of the geographic columns followed by one column per observation.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = self.feature_vocabulary.clone();
        names.extend(observation_column_names(&self.inputs.observations));
        names
    }

    pub fn waypoints(&self) -> Result<WaypointSet, FusionError> {
        WaypointSet::from_points(&self.grid, &self.inputs.waypoints.visit, &self.inputs.waypoints.avoid)
    }
}

/// `"<sketch>:<label>"`, with `#k` appended to repeats.
pub fn observation_column_names(observations: &[ObservationInput]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(observations.len());
    for o in observations {
        let base = format!("{}:{}", o.sketch, o.label);
        let mut name = base.clone();
        let mut k = 2;
        while out.contains(&name) {
            name = format!("{base}#{k}");
            k += 1;
        }
        out.push(name);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStatus {
    Hit,
    Miss,
    Disabled,
}

/// Geographic features, read from or written to `cache_dir` when given.
pub fn geographic_features(scenario: &Scenario, cache_dir: Option<&Path>) -> Result<(FeatureMatrix, CacheStatus), ScenarioError> {
    let Some(dir) = cache_dir else {
        let fm = adjacency_features(&scenario.grid, &scenario.feature_vocabulary, &scenario.layers)?;
        return Ok((fm, CacheStatus::Disabled));
    };
    let key = CacheKey::new(&scenario.id, &scenario.grid, &scenario.feature_vocabulary, &scenario.layers);
    if let Some(fm) = cache::load(dir, &key, &scenario.grid)? {
        return Ok((fm, CacheStatus::Hit));
    }
    let fm = adjacency_features(&scenario.grid, &scenario.feature_vocabulary, &scenario.layers)?;
    cache::store(dir, &key, &scenario.grid, &fm)?;
    Ok((fm, CacheStatus::Miss))
}

#[derive(Debug, Clone)]
pub struct FusedScenario {
    pub features: FeatureMatrix,
    pub posterior: WeightPosterior,
    pub map: RewardMap,
    pub waypoints: WaypointSet,
    /// Normalized sketches that carry an Inside or Near observation, in observation order.
    pub positive_sketches: Vec<Sketch>,
}

/// Appends one semantic column per observation to `geographic`.
pub fn semantic_features(scenario: &Scenario, geographic: &FeatureMatrix) -> Result<FeatureMatrix, ScenarioError> {
    let mut fm = geographic.clone();
    let mut models: BTreeMap<String, SketchModel> = BTreeMap::new();
    let names = observation_column_names(&scenario.inputs.observations);
    for (i, (obs, name)) in scenario.inputs.observations.iter().zip(names).enumerate() {
        let input = scenario
            .sketch(&obs.sketch)
            .ok_or_else(|| invalid(format!("inputs.observations[{i}].sketch"), format!("unknown sketch `{}`", obs.sketch)))?;
        let key = input.name.to_ascii_lowercase();
        if !models.contains_key(&key) {
            let sketch = normalize_sketch(&input.name, &input.vertices)?;
            models.insert(key.clone(), SketchModel::build(sketch, &scenario.semantics, scenario.grid.resolution)?);
        }
        let column = models[&key].feature(obs.label, &scenario.grid);
        fm.push_semantic(name, &column)?;
    }
    Ok(fm)
}

/// Full refit of the reward map from the scenario's current inputs.
pub fn fuse_scenario(scenario: &Scenario, geographic: &FeatureMatrix) -> Result<FusedScenario, ScenarioError> {
    let features = semantic_features(scenario, geographic)?;
    let waypoints = scenario.waypoints()?;
    let (posterior, map) = fusion::fuse(
        &features,
        &scenario.grid,
        &scenario.inputs.priorities,
        &waypoints,
        scenario.prior,
        &scenario.optimizer,
    )?;
    let mut positive_sketches: Vec<Sketch> = Vec::new();
    for obs in scenario.inputs.observations.iter().filter(|o| o.label.is_positive()) {
        let input = scenario.sketch(&obs.sketch).expect("validated");
        if positive_sketches.iter().any(|s| s.name.eq_ignore_ascii_case(&input.name)) {
            continue;
        }
        positive_sketches.push(normalize_sketch(&input.name, &input.vertices)?);
    }
    Ok(FusedScenario {
        features,
        posterior,
        map,
        waypoints,
        positive_sketches,
    })
}

/// Target density from the scenario's truth specification (uniform when it names no features).
pub fn truth_model(scenario: &Scenario, features: &FeatureMatrix) -> Result<TruthModel, ScenarioError> {
    if scenario.simulation.truth.features.is_empty() {
        return Ok(TruthModel::uniform(features.n_cells()));
    }
    let weights: Vec<(String, f64)> = scenario.simulation.truth.features.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let score = feature_score(features, &weights)?;
    Ok(synth_truth_model(&score, scenario.simulation.truth.concentration)?)
}

/// Model, rollout table (when `with_table`) and baseline route for every start cell.
pub fn start_setups(scenario: &Scenario, fused: &FusedScenario, with_table: bool) -> Result<Vec<StartSetup>, ScenarioError> {
    let starts = if scenario.simulation.starts.is_empty() {
        vec![Cell::new(0, 0)]
    } else {
        scenario.simulation.starts.clone()
    };
    let sketches: Vec<&Sketch> = fused.positive_sketches.iter().collect();
    starts
        .into_iter()
        .map(|start| {
            let model = SearchModel::new(scenario.grid.clone(), scenario.pomdp, start, fused.map.mean.clone())?;
            let table = if with_table {
                Some(Arc::new(RolloutValueTable::solve(&model, &scenario.planner.rollout)?))
            } else {
                None
            };
            let route = plan_baseline(&scenario.grid, scenario.grid.index(start), &fused.waypoints.visit, &sketches);
            Ok(StartSetup {
                start,
                model: Arc::new(model),
                table,
                route,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "id": "mini",
            "grid": {"n_rows": 6, "n_cols": 8, "resolution": 10.0}
        })
    }

    fn rich() -> serde_json::Value {
        serde_json::json!({
            "id": "rich",
            "grid": {"n_rows": 12, "n_cols": 12, "resolution": 10.0, "origin": [100.0, 200.0]},
            "layers": [
                {"feature_name": "trails", "geometries": [{"kind": "polyline", "coords": [[100.0, 250.0], [220.0, 250.0]]}]},
                {"feature_name": "stream_lines", "geometries": [{"kind": "polyline", "coords": [[150.0, 200.0], [150.0, 320.0]]}]}
            ],
            "sketches": [{"name": "Ridge", "vertices": [[160.0, 260.0], [200.0, 260.0], [200.0, 300.0], [160.0, 300.0]]}],
            "inputs": {
                "priorities": ["trails"],
                "observations": [{"sketch": "ridge", "label": "inside"}],
                "waypoints": {"visit": [[155.0, 255.0]], "avoid": [[215.0, 205.0]]}
            },
            "pomdp": {"b_max": 80, "n_particles": 500},
            "planner": {"n_simulations": 50, "bucket_size": 5},
            "simulation": {"starts": [{"row": 0, "col": 0}], "truth": {"features": {"stream_lines": 2.0}, "concentration": 3.0}}
        })
    }

    #[test]
    fn minimal_scenario_is_all_zero() {
        let s = Scenario::from_value(minimal()).unwrap();
        let (phi, status) = geographic_features(&s, None).unwrap();
        assert_eq!(status, CacheStatus::Disabled);
        let fused = fuse_scenario(&s, &phi).unwrap();
        assert!(fused.map.mean.iter().all(|&m| m == 0.0));
        assert_eq!(fused.features.n_phi(), DEFAULT_VOCABULARY.len());
    }

    #[test]
    fn schema_errors_carry_paths() {
        let mut v = rich();
        v["inputs"]["waypoints"]["visit"][0] = serde_json::json!("north");
        let err = Scenario::from_value(v).unwrap_err().to_string();
        assert!(err.starts_with("inputs.waypoints.visit[0]"), "{err}");

        let mut v = rich();
        v["inputs"]["priorities"] = serde_json::json!(["bridges"]);
        let err = Scenario::from_value(v).unwrap_err().to_string();
        assert!(err.contains("inputs.priorities[0]") && err.contains("bridges"), "{err}");

        let mut v = rich();
        v["inputs"]["observations"][0]["sketch"] = serde_json::json!("valley");
        assert!(Scenario::from_value(v).unwrap_err().to_string().contains("unknown sketch"));

        let mut v = rich();
        v["inputs"]["waypoints"]["avoid"] = serde_json::json!([[156.0, 256.0]]);
        assert!(Scenario::from_value(v).unwrap_err().to_string().contains("both a visit and an avoid"));

        let mut v = minimal();
        v["surprise"] = serde_json::json!(1);
        assert!(Scenario::from_value(v).is_err());
    }

    #[test]
    fn observation_adds_one_column() {
        let s = Scenario::from_value(rich()).unwrap();
        let (phi, _) = geographic_features(&s, None).unwrap();
        let fused = fuse_scenario(&s, &phi).unwrap();
        assert_eq!(fused.features.n_psi(), 1);
        assert_eq!(fused.features.psi_names(), &["ridge:Inside".to_string()]);
        assert_eq!(fused.positive_sketches.len(), 1);
        let mut more = s.clone();
        more.inputs.observations.push(ObservationInput {
            sketch: "Ridge".into(),
            label: SemanticLabel::Near,
        });
        let fused2 = fuse_scenario(&more, &phi).unwrap();
        assert_eq!(fused2.features.n_psi(), 2);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::from_value(rich()).unwrap();
        let (a, first) = geographic_features(&s, Some(dir.path())).unwrap();
        let (b, second) = geographic_features(&s, Some(dir.path())).unwrap();
        assert_eq!((first, second), (CacheStatus::Miss, CacheStatus::Hit));
        assert_eq!(a, b);
    }

    #[test]
    fn truth_and_setups() {
        let s = Scenario::from_value(rich()).unwrap();
        let (phi, _) = geographic_features(&s, None).unwrap();
        let fused = fuse_scenario(&s, &phi).unwrap();
        let truth = truth_model(&s, &fused.features).unwrap();
        assert!((truth.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let setups = start_setups(&s, &fused, true).unwrap();
        assert_eq!(setups.len(), 1);
        assert!(setups[0].table.is_some());
        assert_eq!(setups[0].route.start, 0);
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::from_value(rich()).unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
    }
}
