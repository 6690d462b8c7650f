//! Synthetic stand-ins for expert inputs: a target-location truth model and an
//! operator whose inputs are derived from known reward weights.

use crate::fusion::WaypointSet;
use crate::geogrid::{FeatureMatrix, GridSpec};
use crate::geometry::Vec2;
use crate::metrics::{quartile_ratings, spread_cells, AlignmentRatings, N_RATED_CELLS};
use crate::sketch::{normalize_sketch, SemanticLabel, Sketch};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("concentration must be positive and finite, got {0}")]
    Concentration(f64),
    #[error("score has {got} cells, grid has {expected}")]
    ScoreLength { got: usize, expected: usize },
    #[error("unknown feature `{0}` in truth specification")]
    UnknownFeature(String),
    #[error("{got} true weights for {expected} feature columns")]
    WeightLength { got: usize, expected: usize },
    #[error("score must be finite")]
    NonFinite,
}

/// Probability that the target sits in each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub probs: Vec<f64>,
}

impl TruthModel {
    pub fn uniform(n_cells: usize) -> Self {
        Self {
            probs: vec![1.0 / n_cells as f64; n_cells],
        }
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("truth model has positive mass")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler().sample(rng)
    }
}

/// Softmax of `concentration * score` over cells.
pub fn synth_truth_model(score: &[f64], concentration: f64) -> Result<TruthModel, SynthError> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(SynthError::Concentration(concentration));
    }
    if score.iter().any(|s| !s.is_finite()) {
        return Err(SynthError::NonFinite);
    }
    let top = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = score.iter().map(|&s| (concentration * (s - top)).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(TruthModel {
        probs: w.into_iter().map(|x| x / z).collect(),
    })
}

/// Weighted sum of named feature columns per cell.
pub fn feature_score(features: &FeatureMatrix, weights: &[(String, f64)]) -> Result<Vec<f64>, SynthError> {
    let x = features.stacked();
    let mut score = vec![0.0; features.n_cells()];
    for (name, w) in weights {
        let j = features
            .column_index(name)
            .ok_or_else(|| SynthError::UnknownFeature(name.clone()))?;
        for (g, s) in score.iter_mut().enumerate() {
            *s += w * x[(g, j)];
        }
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    pub n_waypoints: usize,
    pub n_priorities: usize,
    /// Share of cells at each end of the true reward ranking that waypoints are drawn from.
    pub tail_fraction: f64,
    /// Also sketch a square around the most rewarding cell and label it Inside.
    pub sketch_side_cells: Option<usize>,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            n_waypoints: 30,
            n_priorities: 2,
            tail_fraction: 0.1,
            sketch_side_cells: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOperator {
    pub priorities: Vec<String>,
    pub observations: Vec<(Sketch, SemanticLabel)>,
    pub waypoints: WaypointSet,
    /// Relevances cover the input feature columns followed by one entry per observation.
    pub ratings: AlignmentRatings,
    pub true_reward: Vec<f64>,
}

/// Builds operator inputs consistent with `true_weights` over the feature columns.
pub fn synth_operator(
    true_weights: &[f64],
    features: &FeatureMatrix,
    grid: &GridSpec,
    scenario_id: &str,
    config: &OperatorConfig,
    seed: u64,
) -> Result<SynthOperator, SynthError> {
    let d = features.n_features();
    if true_weights.len() != d {
        return Err(SynthError::WeightLength {
            got: true_weights.len(),
            expected: d,
        });
    }
    let names = features.column_names();
    let x = features.stacked();
    let true_reward: Vec<f64> = (0..features.n_cells())
        .map(|g| (0..d).map(|j| x[(g, j)] * true_weights[j]).sum())
        .collect();

    let mut ranked: Vec<usize> = (0..d).filter(|&j| true_weights[j] > 0.0).collect();
    ranked.sort_by(|&a, &b| true_weights[b].total_cmp(&true_weights[a]).then(a.cmp(&b)));
    let priorities = ranked.into_iter().take(config.n_priorities).map(|j| names[j].clone()).collect();

    let scale = true_weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let mut relevances: Vec<i8> = true_weights
        .iter()
        .map(|&w| if scale > 0.0 { (7.0 * w / scale).round() as i8 } else { 0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..true_reward.len()).collect();
    order.sort_by(|&a, &b| true_reward[b].total_cmp(&true_reward[a]).then(a.cmp(&b)));
    let tail = ((config.tail_fraction * order.len() as f64).ceil() as usize).clamp(1, order.len());
    let n_visit = config.n_waypoints.div_ceil(2).min(tail);
    let n_avoid = (config.n_waypoints / 2).min(tail);
    let mut top: Vec<usize> = order[..tail].to_vec();
    let mut bottom: Vec<usize> = order[order.len() - tail..].to_vec();
    top.shuffle(&mut rng);
    bottom.shuffle(&mut rng);
    let visit: Vec<usize> = top.into_iter().take(n_visit).collect();
    let avoid: Vec<usize> = bottom.into_iter().filter(|c| !visit.contains(c)).take(n_avoid).collect();

    let mut observations = Vec::new();
    if let Some(side) = config.sketch_side_cells {
        let best = grid.cell(order[0]);
        let half = side as f64 * grid.resolution / 2.0;
        let c = grid.center(best);
        let lo = grid.origin;
        let hi = lo + Vec2::new(grid.n_cols as f64, grid.n_rows as f64) * grid.resolution;
        let (x0, x1) = ((c.x - half).max(lo.x), (c.x + half).min(hi.x));
        let (y0, y1) = ((c.y - half).max(lo.y), (c.y + half).min(hi.y));
        if let Ok(sketch) = normalize_sketch(
            "operator area",
            &[Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)],
        ) {
            observations.push((sketch, SemanticLabel::Inside));
            relevances.push(7);
        }
    }

    let rated = spread_cells(grid, N_RATED_CELLS, scenario_id);
    let quartiles = quartile_ratings(&true_reward);
    let cells = rated.into_iter().map(|g| (g, quartiles[g])).collect();

    Ok(SynthOperator {
        priorities,
        observations,
        waypoints: WaypointSet { visit, avoid },
        ratings: AlignmentRatings { cells, relevances },
        true_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn features(grid: &GridSpec) -> FeatureMatrix {
        let n = grid.n_cells();
        let phi = DMatrix::from_fn(n, 3, |g, j| {
            let c = grid.cell(g);
            match j {
                0 => (-(c.col as f64)).exp(),
                1 => (-(c.row as f64) / 3.0).exp(),
                _ => 0.5,
            }
        });
        FeatureMatrix::new(phi, vec!["a".into(), "b".into(), "c".into()])
    }

    #[test]
    fn truth_model_limits() {
        let score = vec![0.0, 0.0, 5.0, 0.0];
        let flat = synth_truth_model(&score, 1e-12).unwrap();
        assert!(flat.probs.iter().all(|p| (p - 0.25).abs() < 1e-9));
        let sharp = synth_truth_model(&score, 100.0).unwrap();
        assert!(sharp.probs[2] > 1.0 - 1e-12);
        let mid = synth_truth_model(&[0.3, -1.0, 2.0], 1.5).unwrap();
        assert!((mid.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(synth_truth_model(&score, 0.0).is_err());
    }

    #[test]
    fn truth_sampling_follows_probabilities() {
        let t = synth_truth_model(&[0.0, 1.0, 2.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..60_000 {
            counts[t.sample(&mut rng)] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 / 60_000.0 - t.probs[k]).abs() < 0.01);
        }
    }

    #[test]
    fn operator_inputs_follow_true_weights() {
        let grid = GridSpec::new(10, 10, 5.0, Vec2::default()).unwrap();
        let fm = features(&grid);
        let w = [2.0, -1.0, 0.0];
        let op = synth_operator(&w, &fm, &grid, "s", &OperatorConfig::default(), 3).unwrap();
        assert_eq!(op.priorities, vec!["a".to_string()]);
        assert_eq!(op.ratings.relevances, vec![7, -4, 0]);
        assert_eq!(op.ratings.cells.len(), 21);
        assert_eq!(op.waypoints.visit.len(), 10);
        assert_eq!(op.waypoints.avoid.len(), 10);
        let mean_visit: f64 = op.waypoints.visit.iter().map(|&g| op.true_reward[g]).sum::<f64>() / 10.0;
        let mean_avoid: f64 = op.waypoints.avoid.iter().map(|&g| op.true_reward[g]).sum::<f64>() / 10.0;
        assert!(mean_visit > mean_avoid);
    }

    #[test]
    fn zero_weights_rate_everything_zero() {
        let grid = GridSpec::new(6, 6, 1.0, Vec2::default()).unwrap();
        let fm = features(&grid);
        let op = synth_operator(&[0.0; 3], &fm, &grid, "z", &OperatorConfig::default(), 1).unwrap();
        assert!(op.ratings.cells.iter().all(|&(_, r)| r == 0));
        assert!(op.priorities.is_empty());
    }

    #[test]
    fn optional_sketch_observation() {
        let grid = GridSpec::new(10, 10, 5.0, Vec2::default()).unwrap();
        let fm = features(&grid);
        let cfg = OperatorConfig {
            sketch_side_cells: Some(3),
            ..OperatorConfig::default()
        };
        let op = synth_operator(&[1.0, 0.0, 0.0], &fm, &grid, "s", &cfg, 3).unwrap();
        assert_eq!(op.observations.len(), 1);
        assert_eq!(op.ratings.relevances.len(), 4);
        // best cell is the south-west corner; the square is clipped to the grid
        let sketch = &op.observations[0].0;
        assert!(sketch.contains(Vec2::new(1.0, 1.0)));
        assert!((sketch.area() - 100.0).abs() < 1e-9);
    }
}
