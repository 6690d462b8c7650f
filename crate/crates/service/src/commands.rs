//! Batch commands behind the `searchgrid` binary.

use anyhow::{bail, Context, Result};
use searchgrid_core::geogrid::Cell;
use searchgrid_core::metrics::{
    alignment_error, binomial_two_tailed, mc_ndcg, quartile_ratings, random_alignment_error, random_ndcg, spread_cells,
    z_test, RankSign, N_RATED_CELLS,
};
use searchgrid_core::raster::{self, RasterManifest};
use searchgrid_core::scenario::{fuse_scenario, geographic_features, start_setups, truth_model, CacheStatus, FusedScenario, Scenario};
use searchgrid_core::sim::{monte_carlo_eval, AgentKind, AgentSummary, EvalConfig, RunRecord};
use searchgrid_core::synth::feature_score;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn load_and_fuse(path: &Path, cache_dir: Option<&Path>) -> Result<(Scenario, FusedScenario, CacheStatus)> {
    let scenario = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (geographic, cache) = geographic_features(&scenario, cache_dir)?;
    let fused = fuse_scenario(&scenario, &geographic)?;
    Ok((scenario, fused, cache))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub scenario: String,
    pub cache: CacheStatus,
    pub manifest: RasterManifest,
    pub reward_min: f64,
    pub reward_max: f64,
}

pub fn fuse(path: &Path, cache_dir: Option<&Path>, out: Option<&Path>) -> Result<FuseReport> {
    let (scenario, fused, cache) = load_and_fuse(path, cache_dir)?;
    let manifest = RasterManifest::new(&scenario.id, &scenario.grid, &fused.posterior);
    if let Some(dir) = out {
        raster::export(dir, &fused.map, &manifest)?;
    }
    Ok(FuseReport {
        scenario: scenario.id,
        cache,
        manifest,
        reward_min: fused.map.mean.iter().copied().fold(f64::INFINITY, f64::min),
        reward_max: fused.map.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

impl BatchOptions {
    fn eval(&self, scenario: &Scenario) -> EvalConfig {
        EvalConfig {
            runs_per_start: self.runs.unwrap_or(scenario.simulation.runs_per_start),
            seed: self.seed.unwrap_or(scenario.simulation.seed),
        }
    }
}

/// Paired Monte Carlo runs for each agent, sharing targets and seeds.
pub fn simulate(scenario: &Scenario, fused: &FusedScenario, agents: &[AgentKind], options: BatchOptions) -> Result<Vec<(Vec<RunRecord>, AgentSummary)>> {
    let truth = truth_model(scenario, &fused.features)?;
    let setups = start_setups(scenario, fused, agents.contains(&AgentKind::Pomcp))?;
    let eval = options.eval(scenario);
    agents
        .iter()
        .map(|&agent| {
            log::info!("running {} x {} {} episodes", setups.len(), eval.runs_per_start, agent.as_str());
            Ok(monte_carlo_eval(&setups, agent, scenario.planner.solver, &truth, &eval)?)
        })
        .collect()
}

pub fn write_runs<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `runs.csv` and `summary.json` under `dir`.
pub fn write_batch<S: Serialize>(dir: &Path, records: &[RunRecord], summary: &S) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_runs(std::fs::File::create(dir.join(RUNS_FILE))?, records)?;
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pomcp: AgentSummary,
    pub baseline: AgentSummary,
    /// Localization ratio difference in percentage points.
    pub localization_gap_pp: f64,
    /// Two-tailed binomial p-value of the tree-search successes against the baseline rate.
    pub localization_p: f64,
    pub reward_z: f64,
    pub reward_p: f64,
    pub reward_ratio: f64,
}

pub fn compare(pomcp: AgentSummary, baseline: AgentSummary) -> Result<Comparison> {
    let localization_p = binomial_two_tailed(pomcp.found as u64, pomcp.runs as u64, baseline.localization_ratio)?;
    let (reward_z, reward_p) = z_test(
        pomcp.reward_per_timestep_mean,
        pomcp.reward_per_timestep_sem,
        baseline.reward_per_timestep_mean,
        baseline.reward_per_timestep_sem,
    )
    .unwrap_or((f64::NAN, f64::NAN));
    Ok(Comparison {
        localization_gap_pp: 100.0 * (pomcp.localization_ratio - baseline.localization_ratio),
        localization_p,
        reward_z,
        reward_p,
        reward_ratio: pomcp.reward_per_timestep_mean / baseline.reward_per_timestep_mean,
        pomcp,
        baseline,
    })
}

/// Operator ratings as read from a file: rated cells and one relevance per feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingsFile {
    pub cells: Vec<RatedCell>,
    pub relevances: Vec<i8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatedCell {
    pub row: usize,
    pub col: usize,
    pub rating: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub scenario: String,
    pub rated_cells: usize,
    pub mc_ndcg_positive: f64,
    pub mc_ndcg_negative: Option<f64>,
    pub random_ndcg_positive: f64,
    pub alignment_error: f64,
    pub random_alignment_error: f64,
}

/// Ratings implied by the scenario's truth weights: quartiles of the true score at
/// spread cells, and relevances scaled to the largest weight with zeros for sketch columns.
pub fn ratings_from_truth(scenario: &Scenario, fused: &FusedScenario) -> Result<RatingsFile> {
    let weights: Vec<(String, f64)> = scenario.simulation.truth.features.iter().map(|(k, v)| (k.clone(), *v)).collect();
    if weights.is_empty() {
        bail!("scenario has no truth features; pass --ratings");
    }
    let score = feature_score(&fused.features, &weights)?;
    let quartiles = quartile_ratings(&score);
    let cells = spread_cells(&scenario.grid, N_RATED_CELLS, &scenario.id)
        .into_iter()
        .map(|g| {
            let c = scenario.grid.cell(g);
            RatedCell {
                row: c.row,
                col: c.col,
                rating: quartiles[g],
            }
        })
        .collect();
    let scale = weights.iter().fold(0.0f64, |m, (_, w)| m.max(w.abs()));
    let relevances = fused
        .features
        .column_names()
        .iter()
        .map(|name| {
            let w = weights.iter().find(|(k, _)| k == name).map_or(0.0, |(_, w)| *w);
            if scale > 0.0 {
                (7.0 * w / scale).round() as i8
            } else {
                0
            }
        })
        .collect();
    Ok(RatingsFile { cells, relevances })
}

pub fn evaluate_alignment(scenario: &Scenario, fused: &FusedScenario, ratings: &RatingsFile, samples: usize, seed: u64) -> Result<AlignmentReport> {
    let grid = &scenario.grid;
    let mut cells = Vec::with_capacity(ratings.cells.len());
    for r in &ratings.cells {
        let cell = Cell::new(r.row, r.col);
        if !grid.contains(cell) {
            bail!("rated cell ({}, {}) is outside the grid", r.row, r.col);
        }
        if !(-1..=2).contains(&r.rating) {
            bail!("rating {} at ({}, {}) is outside -1..=2", r.rating, r.row, r.col);
        }
        cells.push((grid.index(cell), r.rating));
    }
    let post = &fused.posterior;
    let has_negative = ratings.relevances.iter().any(|&r| r < 0);
    Ok(AlignmentReport {
        scenario: scenario.id.clone(),
        rated_cells: cells.len(),
        mc_ndcg_positive: mc_ndcg(post, &ratings.relevances, RankSign::Positive, samples, seed)?,
        mc_ndcg_negative: if has_negative {
            Some(mc_ndcg(post, &ratings.relevances, RankSign::Negative, samples, seed)?)
        } else {
            None
        },
        random_ndcg_positive: random_ndcg(&ratings.relevances, RankSign::Positive, samples, seed)?,
        alignment_error: alignment_error(&fused.map, &cells)?,
        random_alignment_error: random_alignment_error(grid.n_cells(), &cells, samples, seed)?,
    })
}
