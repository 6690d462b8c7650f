//! Alignment metrics between a fused reward map and an operator's own ratings,
//! plus the significance tests used to compare search agents.

use crate::fusion::{RewardMap, WeightPosterior};
use crate::geogrid::GridSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, ContinuousCDF, Discrete, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{got} relevances for {expected} feature columns")]
    RelevanceLength { got: usize, expected: usize },
    #[error("no feature has a positive gain for this sign")]
    NoGain,
    #[error("at least one Monte Carlo sample is required")]
    NoSamples,
    #[error("rated cell {0} is outside the reward map")]
    RatedCell(usize),
    #[error("expected {expected} rated cells, got {got}")]
    RatedCount { expected: usize, got: usize },
    #[error("binomial test needs 0 <= successes <= trials and a rate in [0, 1]")]
    Binomial,
    #[error("both samples have zero standard error; the Z test is undefined")]
    ZeroVariance,
}

/// Number of locations an operator rates.
pub const N_RATED_CELLS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRatings {
    /// (cell index, rating in -1..=2)
    pub cells: Vec<(usize, i8)>,
    /// One relevance in -7..=7 per feature column.
    pub relevances: Vec<i8>,
}

/// Maps values into range quartiles labeled -1, 0, 1, 2.
///
/// A constant input has no range; every value then maps to 0.
pub fn quartile_ratings(values: &[f64]) -> Vec<i8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        if !values.is_empty() {
            log::warn!("reward map has zero range; every cell rates 0");
        }
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            let q = ((v - lo) / range * 4.0).floor().clamp(0.0, 3.0) as i8;
            q - 1
        })
        .collect()
}

/// Variance-weighted squared disagreement between map quartiles and ratings.
///
/// A mismatch on a cell with zero posterior variance is infinitely costly.
pub fn alignment_error(map: &RewardMap, ratings: &[(usize, i8)]) -> Result<f64, MetricError> {
    let q = quartile_ratings(&map.mean);
    let mut e = 0.0;
    for &(g, r) in ratings {
        if g >= q.len() {
            return Err(MetricError::RatedCell(g));
        }
        let d = (q[g] - r) as f64;
        if d != 0.0 {
            e += d * d / map.variance[g];
        }
    }
    Ok(e)
}

/// Alignment error of maps with uniformly random means and unit variance, averaged over `draws`.
pub fn random_alignment_error(n_cells: usize, ratings: &[(usize, i8)], draws: usize, seed: u64) -> Result<f64, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        let map = RewardMap {
            n_rows: 1,
            n_cols: n_cells,
            mean: (0..n_cells).map(|_| rng.random::<f64>()).collect(),
            variance: vec![1.0; n_cells],
        };
        total += alignment_error(&map, ratings)?;
    }
    Ok(total / draws.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankSign {
    Positive,
    Negative,
}

fn gains(relevances: &[i8], sign: RankSign) -> Vec<f64> {
    relevances
        .iter()
        .map(|&r| match sign {
            RankSign::Positive => (r as f64).max(0.0),
            RankSign::Negative => (-(r as f64)).max(0.0),
        })
        .collect()
}

/// nDCG of one weight vector against operator relevances.
///
/// Positive sign ranks features by descending weight with gains `max(rel, 0)`;
/// negative sign ranks by ascending weight with gains `max(-rel, 0)`.
pub fn ndcg(weights: &[f64], relevances: &[i8], sign: RankSign) -> Result<f64, MetricError> {
    if weights.len() != relevances.len() {
        return Err(MetricError::RelevanceLength {
            got: relevances.len(),
            expected: weights.len(),
        });
    }
    let g = gains(relevances, sign);
    let mut ideal = g.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let dcg_of = |gs: &mut dyn Iterator<Item = f64>| -> f64 {
        gs.enumerate().map(|(i, gain)| gain / ((i + 2) as f64).log2()).sum()
    };
    let idcg = dcg_of(&mut ideal.iter().copied());
    if idcg <= 0.0 {
        return Err(MetricError::NoGain);
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    match sign {
        RankSign::Positive => order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b))),
        RankSign::Negative => order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(a.cmp(&b))),
    }
    Ok(dcg_of(&mut order.iter().map(|&i| g[i])) / idcg)
}

/// Square-root factor `L` with `L L' = cov`; falls back to an eigen
/// decomposition with clipped eigenvalues for semidefinite input.
fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// Monte Carlo nDCG over `n_samples` posterior weight draws.
pub fn mc_ndcg(posterior: &WeightPosterior, relevances: &[i8], sign: RankSign, n_samples: usize, seed: u64) -> Result<f64, MetricError> {
    if n_samples == 0 {
        return Err(MetricError::NoSamples);
    }
    let d = posterior.dim();
    if relevances.len() != d {
        return Err(MetricError::RelevanceLength {
            got: relevances.len(),
            expected: d,
        });
    }
    let l = sampling_factor(&posterior.covariance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &posterior.mean + &l * z;
        total += ndcg(w.as_slice(), relevances, sign)?;
    }
    Ok(total / n_samples as f64)
}

/// nDCG of uniformly random feature scores, averaged over `n_samples`.
pub fn random_ndcg(relevances: &[i8], sign: RankSign, n_samples: usize, seed: u64) -> Result<f64, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_samples.max(1) {
        let w: Vec<f64> = (0..relevances.len()).map(|_| rng.random()).collect();
        total += ndcg(&w, relevances, sign)?;
    }
    Ok(total / n_samples.max(1) as f64)
}

/// Exact two-tailed binomial test: sums every outcome no more likely than the observed one.
pub fn binomial_two_tailed(successes: u64, trials: u64, rate: f64) -> Result<f64, MetricError> {
    if successes > trials || !(0.0..=1.0).contains(&rate) {
        return Err(MetricError::Binomial);
    }
    let dist = Binomial::new(rate, trials).map_err(|_| MetricError::Binomial)?;
    let observed = dist.pmf(successes);
    // relative slack so ties survive rounding
    let cutoff = observed * (1.0 + 1e-7);
    let p: f64 = (0..=trials).map(|k| dist.pmf(k)).filter(|&pk| pk <= cutoff).sum();
    Ok(p.min(1.0))
}

/// Two-sample Z test on means with standard errors; returns (z, two-tailed p).
pub fn z_test(mean_a: f64, sem_a: f64, mean_b: f64, sem_b: f64) -> Result<(f64, f64), MetricError> {
    let se = sem_a.hypot(sem_b);
    if se == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let z = (mean_a - mean_b) / se;
    let normal = Normal::standard();
    Ok((z, (2.0 * normal.sf(z.abs())).min(1.0)))
}

/// Mean and standard error of the mean (sample standard deviation over sqrt n).
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `count` geographically spread cells by farthest-point sampling.
/// The first cell is derived from a hash of `key`; ties go to the lowest index.
pub fn spread_cells(grid: &GridSpec, count: usize, key: &str) -> Vec<usize> {
    let n = grid.n_cells();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let digest = Sha256::digest(key.as_bytes());
    let first = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % n;
    let centers: Vec<(f64, f64)> = (0..n).map(|g| {
        let c = grid.cell(g);
        (c.row as f64, c.col as f64)
    }).collect();
    let mut nearest = vec![f64::INFINITY; n];
    let mut chosen = vec![first];
    let mut last = first;
    while chosen.len() < count {
        let (lr, lc) = centers[last];
        let mut best = (f64::NEG_INFINITY, 0);
        for g in 0..n {
            let (r, c) = centers[g];
            let d = (r - lr).powi(2) + (c - lc).powi(2);
            nearest[g] = nearest[g].min(d);
            if nearest[g] > best.0 {
                best = (nearest[g], g);
            }
        }
        last = best.1;
        chosen.push(last);
    }
    chosen
}
