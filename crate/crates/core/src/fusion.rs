//! Bayesian fusion of operator inputs into a per-cell reward map.
//!
//! Weights `w = (theta, delta)` over the stacked features `x_g = (phi_g, psi_g)`
//! get a Gaussian prior shaped by the operator's priorities. Visit and avoid
//! waypoints are logistic observations of the linear reward `r_g = w . x_g`.
//! The posterior over `w` is approximated by a Gaussian at the MAP with the
//! inverse Hessian as covariance, and pushed through to
//! `r_hat_g = mu . x_g`, `var(r_hat_g) = x_g' Sigma x_g`.

use crate::geogrid::{Cell, FeatureMatrix, GridSpec};
use crate::geometry::Vec2;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("unknown priority `{name}`; valid names: {valid}")]
    UnknownPriority { name: String, valid: String },
    #[error("prior hyperparameters must be positive (mean_boost {mean_boost}, sd {sd})")]
    Hyperparameters { mean_boost: f64, sd: f64 },
    #[error("cell ({row}, {col}) is both a visit and an avoid waypoint")]
    ConflictingWaypoint { row: usize, col: usize },
    #[error("waypoint {0:?} lies outside the grid")]
    WaypointOutsideGrid(Vec2),
    #[error("waypoint cell index {0} is outside the grid")]
    WaypointIndex(usize),
    #[error("dimension mismatch: weights have {weights}, features have {features}")]
    Dimension { weights: usize, features: usize },
    #[error("non-finite feature value in column {0}")]
    NonFiniteFeature(usize),
    #[error("MAP search did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub mean_boost: f64,
    pub sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { mean_boost: 1.0, sd: 1.0 }
    }
}

/// Isotropic Gaussian prior over the stacked weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub sd: f64,
}

impl GaussianPrior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> f64 {
        1.0 / (self.sd * self.sd)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * (self.sd * self.sd)
    }
}

/// Resolves a priority name to feature columns.
///
/// Matching is case-insensitive against full column names; a sketch name also
/// matches every semantic column derived from that sketch (`"<sketch>:<label>"`).
pub fn resolve_priority(name: &str, columns: &[String]) -> Vec<usize> {
    let wanted = name.trim();
    let exact: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.eq_ignore_ascii_case(wanted))
        .map(|(i, _)| i)
        .collect();
    if !exact.is_empty() {
        return exact;
    }
    columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.split_once(':').is_some_and(|(sketch, _)| sketch.eq_ignore_ascii_case(wanted)))
        .map(|(i, _)| i)
        .collect()
}

/// Prior mean `mean_boost` on prioritized columns and zero elsewhere, covariance `sd^2 I`.
pub fn build_prior(priorities: &[String], columns: &[String], config: PriorConfig) -> Result<GaussianPrior, FusionError> {
    if !(config.mean_boost > 0.0 && config.sd > 0.0 && config.mean_boost.is_finite() && config.sd.is_finite()) {
        return Err(FusionError::Hyperparameters {
            mean_boost: config.mean_boost,
            sd: config.sd,
        });
    }
    let mut mean = DVector::zeros(columns.len());
    for name in priorities {
        let hits = resolve_priority(name, columns);
        if hits.is_empty() {
            return Err(FusionError::UnknownPriority {
                name: name.clone(),
                valid: columns.join(", "),
            });
        }
        for i in hits {
            mean[i] = config.mean_boost;
        }
    }
    Ok(GaussianPrior { mean, sd: config.sd })
}

/// Visit (`S = 1`) and avoid (`S = 0`) cells, as row-major indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaypointSet {
    pub visit: Vec<usize>,
    pub avoid: Vec<usize>,
}

impl WaypointSet {
    /// Deduplicates each list and rejects cells present in both.
    pub fn from_cells(grid: &GridSpec, visit: &[Cell], avoid: &[Cell]) -> Result<Self, FusionError> {
        let mut set = WaypointSet::default();
        let mut seen_visit = BTreeSet::new();
        let mut seen_avoid = BTreeSet::new();
        for &c in visit {
            if !grid.contains(c) {
                return Err(FusionError::WaypointIndex(c.row * grid.n_cols + c.col));
            }
            if seen_visit.insert(c) {
                set.visit.push(grid.index(c));
            }
        }
        for &c in avoid {
            if !grid.contains(c) {
                return Err(FusionError::WaypointIndex(c.row * grid.n_cols + c.col));
            }
            if seen_visit.contains(&c) {
                return Err(FusionError::ConflictingWaypoint { row: c.row, col: c.col });
            }
            if seen_avoid.insert(c) {
                set.avoid.push(grid.index(c));
            }
        }
        Ok(set)
    }

    /// Snaps metric points to their containing cells first.
    pub fn from_points(grid: &GridSpec, visit: &[Vec2], avoid: &[Vec2]) -> Result<Self, FusionError> {
        let snap = |pts: &[Vec2]| -> Result<Vec<Cell>, FusionError> {
            pts.iter()
                .map(|&p| grid.cell_containing(p).ok_or(FusionError::WaypointOutsideGrid(p)))
                .collect()
        };
        Self::from_cells(grid, &snap(visit)?, &snap(avoid)?)
    }

    pub fn len(&self) -> usize {
        self.visit.len() + self.avoid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Value, gradient and Hessian of the negative log posterior at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The fusion objective: a Gaussian prior plus logistic waypoint likelihoods.
#[derive(Debug, Clone)]
pub struct FusionProblem {
    prior: GaussianPrior,
    /// One row per waypoint.
    design: DMatrix<f64>,
    /// 1.0 for visit, 0.0 for avoid.
    labels: Vec<f64>,
}

impl FusionProblem {
    pub fn new(prior: GaussianPrior, waypoints: &WaypointSet, features: &FeatureMatrix) -> Result<Self, FusionError> {
        if prior.dim() != features.n_features() {
            return Err(FusionError::Dimension {
                weights: prior.dim(),
                features: features.n_features(),
            });
        }
        let d = prior.dim();
        let cells: Vec<(usize, f64)> = waypoints
            .visit
            .iter()
            .map(|&g| (g, 1.0))
            .chain(waypoints.avoid.iter().map(|&g| (g, 0.0)))
            .collect();
        let mut design = DMatrix::zeros(cells.len(), d);
        let mut labels = Vec::with_capacity(cells.len());
        for (k, &(g, s)) in cells.iter().enumerate() {
            if g >= features.n_cells() {
                return Err(FusionError::WaypointIndex(g));
            }
            for (j, v) in features.row(g).into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(FusionError::NonFiniteFeature(j));
                }
                design[(k, j)] = v;
            }
            labels.push(s);
        }
        Ok(Self { prior, design, labels })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn n_observations(&self) -> usize {
        self.labels.len()
    }

    /// Negative log likelihood of the waypoints alone.
    pub fn data_term(&self, weights: &DVector<f64>) -> f64 {
        let r = &self.design * weights;
        r.iter()
            .zip(&self.labels)
            .map(|(&r, &s)| if s > 0.5 { softplus(-r) } else { softplus(r) })
            .sum()
    }

    /// Negative log posterior up to its normalizing constant, with exact derivatives.
    pub fn evaluate(&self, weights: &DVector<f64>) -> Result<Evaluation, FusionError> {
        let d = self.dim();
        if weights.len() != d {
            return Err(FusionError::Dimension {
                weights: weights.len(),
                features: d,
            });
        }
        let tau = self.prior.precision();
        let delta = weights - &self.prior.mean;
        let mut value = 0.5 * tau * delta.norm_squared();
        let mut gradient = &delta * tau;
        let mut hessian = DMatrix::identity(d, d) * tau;
        let r = &self.design * weights;
        for (k, (&rk, &s)) in r.iter().zip(&self.labels).enumerate() {
            let p = sigmoid(rk);
            value += if s > 0.5 { softplus(-rk) } else { softplus(rk) };
            let x = self.design.row(k).transpose();
            gradient.axpy(p - s, &x, 1.0);
            hessian.ger(p * (1.0 - p), &x, &x, 1.0);
        }
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }

    fn value(&self, weights: &DVector<f64>) -> f64 {
        let delta = weights - &self.prior.mean;
        0.5 * self.prior.precision() * delta.norm_squared() + self.data_term(weights)
    }

    fn gradient(&self, weights: &DVector<f64>) -> DVector<f64> {
        let mut g = (weights - &self.prior.mean) * self.prior.precision();
        let r = &self.design * weights;
        for (k, (&rk, &s)) in r.iter().zip(&self.labels).enumerate() {
            let x = self.design.row(k).transpose();
            g.axpy(sigmoid(rk) - s, &x, 1.0);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// BFGS, finishing with Newton steps if it stalls.
    Bfgs,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Optimizer,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Optimizer::Bfgs,
            gradient_tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

/// Gaussian approximation of the weight posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub n_phi: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl WeightPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Backtracking Armijo line search along a descent direction.
fn line_search(problem: &FusionProblem, w: &DVector<f64>, f: f64, g: &DVector<f64>, dir: &DVector<f64>) -> Option<(f64, DVector<f64>, f64)> {
    let slope = g.dot(dir);
    if slope >= 0.0 {
        return None;
    }
    let mut step = 1.0;
    for _ in 0..60 {
        let candidate = w + dir * step;
        let fc = problem.value(&candidate);
        if fc <= f + 1e-4 * step * slope {
            return Some((step, candidate, fc));
        }
        step *= 0.5;
    }
    None
}

fn newton(problem: &FusionProblem, mut w: DVector<f64>, config: &OptimizerConfig, mut iterations: usize) -> Result<(DVector<f64>, usize, f64), FusionError> {
    let limit = iterations + config.max_iterations;
    loop {
        let eval = problem.evaluate(&w)?;
        let gnorm = inf_norm(&eval.gradient);
        if gnorm < config.gradient_tolerance {
            return Ok((w, iterations, gnorm));
        }
        if iterations >= limit {
            return Err(FusionError::NotConverged {
                iterations,
                grad_norm: gnorm,
            });
        }
        let chol = Cholesky::new(eval.hessian).ok_or(FusionError::NotPositiveDefinite)?;
        let dir = -chol.solve(&eval.gradient);
        match line_search(problem, &w, eval.value, &eval.gradient, &dir) {
            Some((_, next, _)) => w = next,
            // no decrease representable in floating point: we are at the optimum
            None => return Ok((w, iterations, gnorm)),
        }
        iterations += 1;
    }
}

fn bfgs(problem: &FusionProblem, mut w: DVector<f64>, config: &OptimizerConfig) -> (DVector<f64>, usize, f64, bool) {
    let d = problem.dim();
    let sd2 = problem.prior().sd * problem.prior().sd;
    // inverse-Hessian estimate seeded with the prior covariance
    let mut h_inv = DMatrix::identity(d, d) * sd2;
    let mut f = problem.value(&w);
    let mut g = problem.gradient(&w);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let gnorm = inf_norm(&g);
        if gnorm < config.gradient_tolerance {
            return (w, iterations, gnorm, true);
        }
        let dir = -(&h_inv * &g);
        let Some((_, next, f_next)) = line_search(problem, &w, f, &g, &dir) else {
            return (w, iterations, gnorm, false);
        };
        let g_next = problem.gradient(&next);
        let s = &next - &w;
        let y = &g_next - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H <- H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h_inv.ger(-rho, &s, &hy, 1.0);
            h_inv.ger(-rho, &hy, &s, 1.0);
            h_inv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        w = next;
        f = f_next;
        g = g_next;
        iterations += 1;
    }
    let gnorm = inf_norm(&g);
    (w, iterations, gnorm, gnorm < config.gradient_tolerance)
}

/// MAP estimate and Laplace covariance.
pub fn laplace_fit(problem: &FusionProblem, column_names: &[String], n_phi: usize, config: &OptimizerConfig) -> Result<WeightPosterior, FusionError> {
    let prior = problem.prior();
    if problem.n_observations() == 0 {
        return Ok(WeightPosterior {
            mean: prior.mean.clone(),
            covariance: prior.covariance(),
            column_names: column_names.to_vec(),
            n_phi,
            iterations: 0,
            gradient_norm: 0.0,
        });
    }
    let start = prior.mean.clone();
    let (mean, iterations, gradient_norm) = match config.method {
        Optimizer::Newton => newton(problem, start, config, 0)?,
        Optimizer::Bfgs => {
            let (w, it, gnorm, converged) = bfgs(problem, start, config);
            if converged {
                (w, it, gnorm)
            } else {
                log::debug!("BFGS stalled at gradient norm {gnorm:e}; finishing with Newton");
                newton(problem, w, config, it)?
            }
        }
    };
    let hessian = problem.evaluate(&mean)?.hessian;
    let chol = Cholesky::new(hessian).ok_or(FusionError::NotPositiveDefinite)?;
    let mut covariance = chol.inverse();
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(WeightPosterior {
        mean,
        covariance,
        column_names: column_names.to_vec(),
        n_phi,
        iterations,
        gradient_norm,
    })
}

/// Posterior reward mean and variance per cell (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMap {
    pub n_rows: usize,
    pub n_cols: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl RewardMap {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            n_rows: grid.n_rows,
            n_cols: grid.n_cols,
            mean: vec![0.0; grid.n_cells()],
            variance: vec![0.0; grid.n_cells()],
        }
    }

    pub fn max_mean(&self) -> f64 {
        self.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_mean(&self) -> f64 {
        self.mean.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `mean_g = mu . x_g` and `var_g = x_g' Sigma x_g` with the full joint covariance.
pub fn reward_map(posterior: &WeightPosterior, features: &FeatureMatrix, grid: &GridSpec) -> Result<RewardMap, FusionError> {
    if posterior.dim() != features.n_features() {
        return Err(FusionError::Dimension {
            weights: posterior.dim(),
            features: features.n_features(),
        });
    }
    let x = features.stacked();
    let mean = &x * &posterior.mean;
    let xs = &x * &posterior.covariance;
    let variance = xs
        .row_iter()
        .zip(x.row_iter())
        .map(|(a, b)| a.dot(&b).max(0.0))
        .collect();
    Ok(RewardMap {
        n_rows: grid.n_rows,
        n_cols: grid.n_cols,
        mean: mean.iter().copied().collect(),
        variance,
    })
}

/// Prior, fit and reward map in one call.
pub fn fuse(
    features: &FeatureMatrix,
    grid: &GridSpec,
    priorities: &[String],
    waypoints: &WaypointSet,
    prior_config: PriorConfig,
    optimizer: &OptimizerConfig,
) -> Result<(WeightPosterior, RewardMap), FusionError> {
    let columns = features.column_names();
    let prior = build_prior(priorities, &columns, prior_config)?;
    let problem = FusionProblem::new(prior, waypoints, features)?;
    let posterior = laplace_fit(&problem, &columns, features.n_phi(), optimizer)?;
    let map = reward_map(&posterior, features, grid)?;
    Ok((posterior, map))
}
