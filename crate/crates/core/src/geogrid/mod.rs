//! Operational grid and static geographic features.
//!
//! Cells are indexed row-major, zero-based. Row 0 is the southern edge of the
//! grid (the origin is the lower-left corner), so increasing row index moves
//! north and increasing column index moves east.
//!
//! Each geographic layer contributes one adjacency column
//! `phi = exp(-d / resolution)`, where `d` is the distance from the cell
//! center to the nearest geometry of the layer.

pub mod cache;

use crate::geometry::{self, Vec2};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default feature vocabulary for geographic layers.
pub const DEFAULT_VOCABULARY: [&str; 6] = [
    "roads",
    "trails",
    "structures",
    "stream_lines",
    "water_bodies",
    "tree_canopy",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("layer `{layer}` geometry #{index}: {reason}")]
    MalformedGeometry {
        layer: String,
        index: usize,
        reason: String,
    },
    #[error("unknown feature layer `{0}`")]
    UnknownLayer(String),
    #[error("feature column `{0}` already exists")]
    DuplicateColumn(String),
    #[error("column length {got} does not match {expected} grid cells")]
    ColumnLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Meters per cell edge.
    pub resolution: f64,
    /// Lower-left corner of the grid, meters.
    #[serde(default)]
    pub origin: Vec2,
}

impl GridSpec {
    pub fn new(n_rows: usize, n_cols: usize, resolution: f64, origin: Vec2) -> Result<Self, GeoError> {
        let grid = Self {
            n_rows,
            n_cols,
            resolution,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(GeoError::InvalidGrid(format!(
                "dimensions must be positive, got {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(GeoError::InvalidGrid(format!(
                "resolution must be positive and finite, got {}",
                self.resolution
            )));
        }
        if !(self.origin.x.is_finite() && self.origin.y.is_finite()) {
            return Err(GeoError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(self.contains(cell));
        cell.row * self.n_cols + cell.col
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell::new(index / self.n_cols, index % self.n_cols)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.n_rows && cell.col < self.n_cols
    }

    /// Cell at a signed offset from `cell`, or `None` when it leaves the grid.
    pub fn offset(&self, cell: Cell, d_row: i64, d_col: i64) -> Option<Cell> {
        let r = cell.row as i64 + d_row;
        let c = cell.col as i64 + d_col;
        if r < 0 || c < 0 || r >= self.n_rows as i64 || c >= self.n_cols as i64 {
            None
        } else {
            Some(Cell::new(r as usize, c as usize))
        }
    }

    pub fn center(&self, cell: Cell) -> Vec2 {
        Vec2::new(
            self.origin.x + (cell.col as f64 + 0.5) * self.resolution,
            self.origin.y + (cell.row as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing a metric point; points on the far edges snap inward.
    pub fn cell_containing(&self, p: Vec2) -> Option<Cell> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fy = (p.y - self.origin.y) / self.resolution;
        if !(fx.is_finite() && fy.is_finite()) || fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        let col = if fx == self.n_cols as f64 { col - 1 } else { col };
        let row = if fy == self.n_rows as f64 { row - 1 } else { row };
        let cell = Cell::new(row, col);
        self.contains(cell).then_some(cell)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_cells()).map(move |i| self.cell(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    /// One or more isolated points.
    Point { coords: Vec<Vec2> },
    Polyline { coords: Vec<Vec2> },
    Polygon { coords: Vec<Vec2> },
}

impl Geometry {
    pub fn coords(&self) -> &[Vec2] {
        match self {
            Geometry::Point { coords } | Geometry::Polyline { coords } | Geometry::Polygon { coords } => coords,
        }
    }

    fn translated(&self, by: Vec2) -> Geometry {
        let shift = |c: &[Vec2]| c.iter().map(|&p| p + by).collect();
        match self {
            Geometry::Point { coords } => Geometry::Point { coords: shift(coords) },
            Geometry::Polyline { coords } => Geometry::Polyline { coords: shift(coords) },
            Geometry::Polygon { coords } => Geometry::Polygon { coords: shift(coords) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoLayer {
    pub feature_name: String,
    #[serde(default)]
    pub geometries: Vec<Geometry>,
}

impl GeoLayer {
    pub fn new(feature_name: impl Into<String>, geometries: Vec<Geometry>) -> Self {
        Self {
            feature_name: feature_name.into(),
            geometries,
        }
    }

    pub fn translated(&self, by: Vec2) -> GeoLayer {
        GeoLayer {
            feature_name: self.feature_name.clone(),
            geometries: self.geometries.iter().map(|g| g.translated(by)).collect(),
        }
    }
}

/// Geometry ready for distance queries; polygons drop a repeated closing vertex.
enum Prepared {
    Points(Vec<Vec2>),
    Polyline(Vec<Vec2>),
    Polygon(Vec<Vec2>),
}

impl Prepared {
    fn distance(&self, p: Vec2) -> f64 {
        match self {
            Prepared::Points(pts) => pts.iter().map(|&q| p.distance(q)).fold(f64::INFINITY, f64::min),
            Prepared::Polyline(v) => v
                .windows(2)
                .map(|w| geometry::point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
            Prepared::Polygon(ring) => {
                if geometry::point_in_polygon(p, ring) {
                    0.0
                } else {
                    geometry::ring_boundary_distance(p, ring)
                }
            }
        }
    }
}

/// Validates a layer and converts it into a frame whose origin is `frame_origin`.
fn prepare(layer: &GeoLayer, frame_origin: Vec2) -> Result<Vec<Prepared>, GeoError> {
    let malformed = |index: usize, reason: String| GeoError::MalformedGeometry {
        layer: layer.feature_name.clone(),
        index,
        reason,
    };
    let local = |c: &[Vec2]| -> Vec<Vec2> { c.iter().map(|&p| p - frame_origin).collect() };
    let mut out = Vec::with_capacity(layer.geometries.len());
    for (index, g) in layer.geometries.iter().enumerate() {
        let coords = g.coords();
        if coords.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(malformed(index, "non-finite coordinate".into()));
        }
        match g {
            Geometry::Point { coords } => {
                if coords.is_empty() {
                    return Err(malformed(index, "point geometry without coordinates".into()));
                }
                out.push(Prepared::Points(local(coords)));
            }
            Geometry::Polyline { coords } => {
                if coords.len() < 2 {
                    return Err(malformed(index, format!("polyline needs >= 2 vertices, got {}", coords.len())));
                }
                out.push(Prepared::Polyline(local(coords)));
            }
            Geometry::Polygon { coords } => {
                let mut ring = local(coords);
                if ring.len() > 1 && ring.first() == ring.last() {
                    ring.pop();
                }
                if ring.len() < 3 {
                    return Err(malformed(index, format!("polygon needs >= 3 vertices, got {}", ring.len())));
                }
                if geometry::signed_area(&ring).abs() == 0.0 {
                    return Err(malformed(index, "polygon has zero area".into()));
                }
                if let Some((a, b)) = geometry::find_self_intersection(&ring) {
                    return Err(malformed(index, format!("polygon is self-intersecting (edges {a} and {b})")));
                }
                out.push(Prepared::Polygon(ring));
            }
        }
    }
    Ok(out)
}

/// Checks every geometry of a layer without computing distances.
pub fn validate_layer(layer: &GeoLayer) -> Result<(), GeoError> {
    prepare(layer, Vec2::default()).map(|_| ())
}

/// Euclidean distance (meters) from each cell center to the nearest geometry of
/// the layer, row-major. Empty layers give `+inf` everywhere.
pub fn distance_field(layer: &GeoLayer, grid: &GridSpec) -> Result<Vec<f64>, GeoError> {
    grid.validate()?;
    // Work relative to the grid origin: projected coordinates are large and
    // the local frame keeps results independent of where the grid sits.
    let prepared = prepare(layer, grid.origin)?;
    let res = grid.resolution;
    Ok(grid
        .cells()
        .map(|cell| {
            let c = Vec2::new((cell.col as f64 + 0.5) * res, (cell.row as f64 + 0.5) * res);
            prepared.iter().map(|g| g.distance(c)).fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Per-cell geographic and semantic feature columns.
///
/// `phi` holds one column per geographic feature, `psi` one column per
/// semantic observation, both with one row per grid cell (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
    phi_names: Vec<String>,
    psi_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(phi: DMatrix<f64>, phi_names: Vec<String>) -> Self {
        assert_eq!(phi.ncols(), phi_names.len(), "phi column names");
        let n = phi.nrows();
        Self {
            phi,
            psi: DMatrix::zeros(n, 0),
            phi_names,
            psi_names: Vec::new(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_psi(&self) -> usize {
        self.psi.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.n_phi() + self.n_psi()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn phi_names(&self) -> &[String] {
        &self.phi_names
    }

    pub fn psi_names(&self) -> &[String] {
        &self.psi_names
    }

    /// Geographic names followed by semantic names.
    pub fn column_names(&self) -> Vec<String> {
        self.phi_names.iter().chain(&self.psi_names).cloned().collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.phi_names
            .iter()
            .chain(&self.psi_names)
            .position(|n| n == name)
    }

    /// Appends a semantic column (one entry per cell).
    pub fn push_semantic(&mut self, name: impl Into<String>, column: &[f64]) -> Result<(), GeoError> {
        let name = name.into();
        if self.column_index(&name).is_some() {
            return Err(GeoError::DuplicateColumn(name));
        }
        if column.len() != self.n_cells() {
            return Err(GeoError::ColumnLength {
                expected: self.n_cells(),
                got: column.len(),
            });
        }
        let k = self.psi.ncols();
        let psi = std::mem::replace(&mut self.psi, DMatrix::zeros(0, 0));
        let mut psi = psi.insert_column(k, 0.0);
        psi.column_mut(k).copy_from_slice(column);
        self.psi = psi;
        self.psi_names.push(name);
        Ok(())
    }

    /// Stacked feature vector `(phi_g, psi_g)` of one cell.
    pub fn row(&self, cell_index: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_features());
        v.extend(self.phi.row(cell_index).iter());
        v.extend(self.psi.row(cell_index).iter());
        v
    }

    /// The full design matrix `[phi | psi]` (cells x features).
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.n_cells();
        let mut x = DMatrix::zeros(n, self.n_features());
        x.columns_mut(0, self.n_phi()).copy_from(&self.phi);
        x.columns_mut(self.n_phi(), self.n_psi()).copy_from(&self.psi);
        x
    }
}

/// Adjacency features for the given vocabulary. Layers are matched by
/// `feature_name`; vocabulary entries without a layer become all-zero columns.
pub fn adjacency_features(grid: &GridSpec, vocabulary: &[String], layers: &[GeoLayer]) -> Result<FeatureMatrix, GeoError> {
    grid.validate()?;
    if let Some(stray) = layers.iter().find(|l| !vocabulary.contains(&l.feature_name)) {
        return Err(GeoError::UnknownLayer(stray.feature_name.clone()));
    }
    let n = grid.n_cells();
    let mut phi = DMatrix::zeros(n, vocabulary.len());
    for (f, name) in vocabulary.iter().enumerate() {
        let mut dist = vec![f64::INFINITY; n];
        for layer in layers.iter().filter(|l| &l.feature_name == name) {
            for (d, e) in dist.iter_mut().zip(distance_field(layer, grid)?) {
                *d = d.min(e);
            }
        }
        for (g, d) in dist.into_iter().enumerate() {
            phi[(g, f)] = adjacency(d, grid.resolution);
        }
    }
    Ok(FeatureMatrix::new(phi, vocabulary.to_vec()))
}

/// `exp(-d / resolution)` with `exp(-inf) = 0`.
pub fn adjacency(distance: f64, resolution: f64) -> f64 {
    if distance.is_infinite() {
        0.0
    } else {
        (-distance / resolution).exp()
    }
}
