//! Semantic features from operator sketches.
//!
//! A sketch is reduced to a convex polygon with at most five vertices. Its
//! boundary induces a softmax partition of the plane: one interior class plus
//! exterior classes hinged on each edge. A Monte-Carlo pass correlates those
//! classes with the closed label vocabulary, giving `p(label | class)`. The
//! per-cell semantic feature is the mixture
//! `psi(g) = sum_c p(label | c) * p(c | x_g)`.

use crate::geogrid::GridSpec;
use crate::geometry::{self, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const MAX_SKETCH_VERTICES: usize = 5;
pub const MIN_LABEL_SAMPLES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("sketch `{name}` needs at least 3 distinct points, got {got}")]
    TooFewPoints { name: String, got: usize },
    #[error("sketch `{0}` has zero area (collinear points)")]
    Degenerate(String),
    #[error("sketch `{0}` has a non-finite coordinate")]
    NonFinite(String),
    #[error("steepness must be positive, got {0}")]
    Steepness(f64),
    #[error("near band must be positive, got {0}")]
    NearBand(f64),
    #[error("label sampling needs at least {MIN_LABEL_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("unknown semantic label `{0}`")]
    UnknownLabel(String),
}

/// The closed label vocabulary: eight compass bearings and three ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SemanticLabel {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
    Inside,
    Near,
    Outside,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 11] = [
        SemanticLabel::N,
        SemanticLabel::NE,
        SemanticLabel::E,
        SemanticLabel::SE,
        SemanticLabel::S,
        SemanticLabel::SW,
        SemanticLabel::W,
        SemanticLabel::NW,
        SemanticLabel::Inside,
        SemanticLabel::Near,
        SemanticLabel::Outside,
    ];
    pub const BEARINGS: [SemanticLabel; 8] = [
        SemanticLabel::N,
        SemanticLabel::NE,
        SemanticLabel::E,
        SemanticLabel::SE,
        SemanticLabel::S,
        SemanticLabel::SW,
        SemanticLabel::W,
        SemanticLabel::NW,
    ];
    pub const RANGES: [SemanticLabel; 3] = [SemanticLabel::Inside, SemanticLabel::Near, SemanticLabel::Outside];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_range(self) -> bool {
        matches!(self, SemanticLabel::Inside | SemanticLabel::Near | SemanticLabel::Outside)
    }

    /// "Inside" and "Near" are the labels that direct search toward a sketch.
    pub fn is_positive(self) -> bool {
        matches!(self, SemanticLabel::Inside | SemanticLabel::Near)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticLabel::N => "N",
            SemanticLabel::NE => "NE",
            SemanticLabel::E => "E",
            SemanticLabel::SE => "SE",
            SemanticLabel::S => "S",
            SemanticLabel::SW => "SW",
            SemanticLabel::W => "W",
            SemanticLabel::NW => "NW",
            SemanticLabel::Inside => "Inside",
            SemanticLabel::Near => "Near",
            SemanticLabel::Outside => "Outside",
        }
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SemanticLabel {
    type Err = SketchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SemanticLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SketchError::UnknownLabel(s.to_string()))
    }
}

impl TryFrom<String> for SemanticLabel {
    type Error = SketchError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SemanticLabel> for String {
    fn from(l: SemanticLabel) -> String {
        l.as_str().to_string()
    }
}

/// Compass sector (45 degrees wide, centered on each direction) of `p` seen from `from`.
pub fn bearing_label(from: Vec2, p: Vec2) -> SemanticLabel {
    let d = p - from;
    // clockwise from north
    let theta = d.x.atan2(d.y).rem_euclid(2.0 * PI);
    let sector = ((theta / (PI / 4.0)).round() as usize) % 8;
    SemanticLabel::BEARINGS[sector]
}

/// A normalized operator sketch: convex, counterclockwise, at most five vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub name: String,
    vertices: Vec<Vec2>,
}

impl Sketch {
    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        geometry::signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Vec2 {
        geometry::centroid(&self.vertices)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        geometry::point_in_polygon(p, &self.vertices)
    }

    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        geometry::ring_boundary_distance(p, &self.vertices)
    }

    /// Outward unit normal of edge `k` (from vertex `k` to `k + 1`).
    pub fn outward_normal(&self, k: usize) -> Vec2 {
        let n = self.vertices.len();
        let e = self.vertices[(k + 1) % n] - self.vertices[k];
        let len = e.norm();
        // counterclockwise ring: the exterior is to the right of each edge
        Vec2::new(e.y / len, -e.x / len)
    }

    pub fn n_edges(&self) -> usize {
        self.vertices.len()
    }
}

/// Convex hull of the raw points, then greedy removal of the vertex whose
/// removal loses the least area until at most five remain.
pub fn normalize_sketch(name: &str, raw: &[Vec2]) -> Result<Sketch, SketchError> {
    if raw.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(SketchError::NonFinite(name.to_string()));
    }
    let mut distinct = raw.to_vec();
    distinct.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(SketchError::TooFewPoints {
            name: name.to_string(),
            got: distinct.len(),
        });
    }
    let mut hull = geometry::convex_hull(&distinct);
    if hull.len() < 3 || geometry::signed_area(&hull) <= 0.0 {
        return Err(SketchError::Degenerate(name.to_string()));
    }
    while hull.len() > MAX_SKETCH_VERTICES {
        let n = hull.len();
        let (drop, _) = (0..n)
            .map(|i| {
                let loss = geometry::orient(hull[(i + n - 1) % n], hull[i], hull[(i + 1) % n]).abs();
                (i, loss)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty hull");
        hull.remove(drop);
    }
    Ok(Sketch {
        name: name.to_string(),
        vertices: hull,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassRole {
    Interior,
    /// Band just outside edge `k`.
    Edge(usize),
    /// Band beyond the near offset outside edge `k`.
    FarEdge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClass {
    pub w: Vec2,
    pub b: f64,
    pub role: ClassRole,
}

impl SoftmaxClass {
    fn logit(&self, x: Vec2) -> f64 {
        self.w.dot(x) + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub classes: Vec<SoftmaxClass>,
}

impl SoftmaxModel {
    /// Builds the boundary-hinged softmax partition of a sketch.
    ///
    /// Edge class `k` has `w = s * n_k` and a bias that makes its logit equal
    /// the interior logit (zero) on the supporting line of edge `k`, so the
    /// logit is `s` times the signed distance to that line. With
    /// `far_offset = Some(o)` each edge also gets a steeper class
    /// (`w = 2 s n_k`) that overtakes the near class at distance `o`.
    pub fn build(sketch: &Sketch, steepness: f64, far_offset: Option<f64>) -> Result<Self, SketchError> {
        if !(steepness.is_finite() && steepness > 0.0) {
            return Err(SketchError::Steepness(steepness));
        }
        if let Some(o) = far_offset {
            if !(o.is_finite() && o > 0.0) {
                return Err(SketchError::NearBand(o));
            }
        }
        let mut classes = vec![SoftmaxClass {
            w: Vec2::default(),
            b: 0.0,
            role: ClassRole::Interior,
        }];
        let v = sketch.vertices();
        for k in 0..sketch.n_edges() {
            let n = sketch.outward_normal(k);
            let offset = n.dot(v[k]);
            classes.push(SoftmaxClass {
                w: n * steepness,
                b: -steepness * offset,
                role: ClassRole::Edge(k),
            });
        }
        if let Some(o) = far_offset {
            for k in 0..sketch.n_edges() {
                let n = sketch.outward_normal(k);
                let offset = n.dot(v[k]);
                classes.push(SoftmaxClass {
                    w: n * (2.0 * steepness),
                    b: -2.0 * steepness * offset - steepness * o,
                    role: ClassRole::FarEdge(k),
                });
            }
        }
        Ok(Self { classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn logits(&self, x: Vec2) -> Vec<f64> {
        self.classes.iter().map(|c| c.logit(x)).collect()
    }

    /// `p(class | x)`, computed with the max-logit shift.
    pub fn probabilities(&self, x: Vec2) -> Vec<f64> {
        let mut z = self.logits(x);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        z.iter_mut().for_each(|v| *v /= total);
        z
    }

    /// Dominant class at `x`; ties go to the lowest class index.
    pub fn argmax(&self, x: Vec2) -> usize {
        let mut best = 0;
        let mut best_z = f64::NEG_INFINITY;
        for (i, c) in self.classes.iter().enumerate() {
            let z = c.logit(x);
            if z > best_z {
                best = i;
                best_z = z;
            }
        }
        best
    }
}

/// `p(label | class)` for every class, estimated by Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelClassTable {
    /// `probs[class][label.index()]`
    pub probs: Vec<[f64; 11]>,
    /// Accepted samples per class.
    pub sample_counts: Vec<usize>,
    /// Classes whose dominance region was never hit and fell back to uniform rows.
    pub fallback_classes: Vec<usize>,
}

impl LabelClassTable {
    pub fn get(&self, class: usize, label: SemanticLabel) -> f64 {
        self.probs[class][label.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSampling {
    pub n_samples: usize,
    pub near_band: f64,
    pub seed: u64,
}

/// Geometric label predicates for a single point.
fn point_labels(sketch: &Sketch, centroid: Vec2, near_band: f64, p: Vec2) -> (SemanticLabel, SemanticLabel) {
    let range = if sketch.contains(p) {
        SemanticLabel::Inside
    } else if sketch.boundary_distance(p) <= near_band {
        SemanticLabel::Near
    } else {
        SemanticLabel::Outside
    };
    (range, bearing_label(centroid, p))
}

/// Rejection-samples each class's dominance region inside a disc around the
/// sketch and records which labels the samples satisfy.
pub fn label_given_class(model: &SoftmaxModel, sketch: &Sketch, params: LabelSampling) -> Result<LabelClassTable, SketchError> {
    if params.n_samples < MIN_LABEL_SAMPLES {
        return Err(SketchError::TooFewSamples(params.n_samples));
    }
    if !(params.near_band.is_finite() && params.near_band > 0.0) {
        return Err(SketchError::NearBand(params.near_band));
    }
    let centroid = sketch.centroid();
    let r_max = sketch
        .vertices()
        .iter()
        .map(|v| v.distance(centroid))
        .fold(0.0, f64::max);
    // Disc window: rotation invariant and wide enough to hold every near band.
    let radius = 2.0 * r_max + 4.0 * params.near_band;
    let n_classes = model.n_classes();
    let mut counts = vec![[0usize; 11]; n_classes];
    let mut accepted = vec![0usize; n_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let max_draws = params.n_samples.saturating_mul(n_classes).saturating_mul(500);
    let mut draws = 0usize;
    while accepted.iter().any(|&a| a < params.n_samples) && draws < max_draws {
        draws += 1;
        let r = radius * rng.random::<f64>().sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        let p = centroid + Vec2::new(r * phi.cos(), r * phi.sin());
        let c = model.argmax(p);
        if accepted[c] >= params.n_samples {
            continue;
        }
        accepted[c] += 1;
        let (range, bearing) = point_labels(sketch, centroid, params.near_band, p);
        counts[c][range.index()] += 1;
        counts[c][bearing.index()] += 1;
    }
    let mut fallback_classes = Vec::new();
    let probs = counts
        .iter()
        .zip(&accepted)
        .enumerate()
        .map(|(c, (row, &n))| {
            let mut out = [0.0; 11];
            if n == 0 {
                log::warn!("sketch `{}`: class {c} has an empty dominance region; using a uniform row", sketch.name);
                fallback_classes.push(c);
                for l in SemanticLabel::BEARINGS {
                    out[l.index()] = 1.0 / 8.0;
                }
                for l in SemanticLabel::RANGES {
                    out[l.index()] = 1.0 / 3.0;
                }
            } else {
                for (o, &k) in out.iter_mut().zip(row.iter()) {
                    *o = k as f64 / n as f64;
                }
            }
            out
        })
        .collect();
    Ok(LabelClassTable {
        probs,
        sample_counts: accepted,
        fallback_classes,
    })
}

/// `p(label | x)` at a single point.
pub fn semantic_likelihood(model: &SoftmaxModel, table: &LabelClassTable, label: SemanticLabel, x: Vec2) -> f64 {
    model
        .probabilities(x)
        .iter()
        .enumerate()
        .map(|(c, p)| p * table.get(c, label))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// One semantic feature column evaluated at every cell center (row-major).
pub fn semantic_feature(model: &SoftmaxModel, table: &LabelClassTable, label: SemanticLabel, grid: &GridSpec) -> Vec<f64> {
    grid.cells()
        .map(|cell| semantic_likelihood(model, table, label, grid.center(cell)))
        .collect()
}

/// Tunables for turning a sketch into a feature column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticConfig {
    /// Softmax steepness per meter; `None` means `5 / resolution`.
    pub steepness: Option<f64>,
    /// Width of the "Near" band in meters; `None` means `2 * resolution`.
    pub near_band: Option<f64>,
    /// 1 = a single exterior class per edge, 2 = near and far classes per edge.
    pub exterior_bands: u8,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            steepness: None,
            near_band: None,
            exterior_bands: 2,
            n_samples: 2000,
            seed: 0x5e_3a_17,
        }
    }
}

impl SemanticConfig {
    pub fn steepness_for(&self, resolution: f64) -> f64 {
        self.steepness.unwrap_or(5.0 / resolution)
    }

    pub fn near_band_for(&self, resolution: f64) -> f64 {
        self.near_band.unwrap_or(2.0 * resolution)
    }
}

/// A sketch with its fitted softmax model and label table, ready to emit columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchModel {
    pub sketch: Sketch,
    pub softmax: SoftmaxModel,
    pub table: LabelClassTable,
}

impl SketchModel {
    pub fn build(sketch: Sketch, config: &SemanticConfig, resolution: f64) -> Result<Self, SketchError> {
        let band = config.near_band_for(resolution);
        let far = (config.exterior_bands >= 2).then_some(band);
        let softmax = SoftmaxModel::build(&sketch, config.steepness_for(resolution), far)?;
        let table = label_given_class(
            &softmax,
            &sketch,
            LabelSampling {
                n_samples: config.n_samples,
                near_band: band,
                seed: config.seed,
            },
        )?;
        Ok(Self { sketch, softmax, table })
    }

    pub fn feature(&self, label: SemanticLabel, grid: &GridSpec) -> Vec<f64> {
        semantic_feature(&self.softmax, &self.table, label, grid)
    }

    pub fn likelihood(&self, label: SemanticLabel, x: Vec2) -> f64 {
        semantic_likelihood(&self.softmax, &self.table, label, x)
    }
}
