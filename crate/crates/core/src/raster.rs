//! Text raster export of a reward map: `mean.csv`, `variance.csv` and `manifest.json`.
//!
//! Line `r` of each CSV holds grid row `r`, so the first line is the southern edge.

use crate::fusion::{RewardMap, WeightPosterior};
use crate::geogrid::GridSpec;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MEAN_FILE: &str = "mean.csv";
pub const VARIANCE_FILE: &str = "variance.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("raster is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Shape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("bad number `{0}` in raster")]
    Number(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterManifest {
    pub scenario_id: String,
    pub grid: GridSpec,
    pub row_order: String,
    pub columns: Vec<String>,
    pub posterior_mean: Vec<f64>,
    pub posterior_covariance: Vec<Vec<f64>>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl RasterManifest {
    pub fn new(scenario_id: &str, grid: &GridSpec, posterior: &WeightPosterior) -> Self {
        let d = posterior.dim();
        Self {
            scenario_id: scenario_id.to_string(),
            grid: grid.clone(),
            row_order: "south_to_north".into(),
            columns: posterior.column_names.clone(),
            posterior_mean: posterior.mean.iter().copied().collect(),
            posterior_covariance: (0..d).map(|i| (0..d).map(|j| posterior.covariance[(i, j)]).collect()).collect(),
            iterations: posterior.iterations,
            gradient_norm: posterior.gradient_norm,
        }
    }
}

/// Writes one plane as CSV text, one line per grid row.
pub fn write_plane<W: Write>(out: W, values: &[f64], n_cols: usize) -> Result<(), RasterError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in values.chunks(n_cols) {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn plane_to_string(values: &[f64], n_cols: usize) -> String {
    let mut buf = Vec::new();
    write_plane(&mut buf, values, n_cols).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Reads one plane and checks its shape.
pub fn read_plane<R: Read>(input: R, n_rows: usize, n_cols: usize) -> Result<Vec<f64>, RasterError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut values = Vec::with_capacity(n_rows * n_cols);
    let mut rows = 0;
    for record in r.records() {
        let record = record?;
        if record.len() != n_cols {
            return Err(RasterError::Shape {
                rows: rows + 1,
                cols: record.len(),
                expected_rows: n_rows,
                expected_cols: n_cols,
            });
        }
        for field in record.iter() {
            values.push(field.trim().parse().map_err(|_| RasterError::Number(field.to_string()))?);
        }
        rows += 1;
    }
    if rows != n_rows {
        return Err(RasterError::Shape {
            rows,
            cols: n_cols,
            expected_rows: n_rows,
            expected_cols: n_cols,
        });
    }
    Ok(values)
}

pub fn export(dir: &Path, map: &RewardMap, manifest: &RasterManifest) -> Result<(), RasterError> {
    std::fs::create_dir_all(dir)?;
    write_plane(std::fs::File::create(dir.join(MEAN_FILE))?, &map.mean, map.n_cols)?;
    write_plane(std::fs::File::create(dir.join(VARIANCE_FILE))?, &map.variance, map.n_cols)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn import(dir: &Path) -> Result<(RewardMap, RasterManifest), RasterError> {
    let manifest: RasterManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let (n_rows, n_cols) = (manifest.grid.n_rows, manifest.grid.n_cols);
    let mean = read_plane(std::fs::File::open(dir.join(MEAN_FILE))?, n_rows, n_cols)?;
    let variance = read_plane(std::fs::File::open(dir.join(VARIANCE_FILE))?, n_rows, n_cols)?;
    Ok((
        RewardMap {
            n_rows,
            n_cols,
            mean,
            variance,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn round_trip_is_exact() {
        let grid = GridSpec::new(3, 4, 2.0, Vec2::new(5.0, 6.0)).unwrap();
        let map = RewardMap {
            n_rows: 3,
            n_cols: 4,
            mean: (0..12).map(|i| (i as f64).sin() / 3.0).collect(),
            variance: (0..12).map(|i| 1e-9 * i as f64).collect(),
        };
        let posterior = WeightPosterior {
            mean: DVector::from_vec(vec![0.5, -1.25]),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]),
            column_names: vec!["trails".into(), "a:Inside".into()],
            n_phi: 1,
            iterations: 7,
            gradient_norm: 1e-10,
        };
        let dir = tempfile::tempdir().unwrap();
        export(dir.path(), &map, &RasterManifest::new("s", &grid, &posterior)).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MEAN_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split(',').count() == 4));
        let (back, manifest) = import(dir.path()).unwrap();
        assert_eq!(back, map);
        assert_eq!(manifest.columns, posterior.column_names);
        assert_eq!(manifest.posterior_covariance[0][1], 0.1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let text = "1,2,3\n4,5\n";
        assert!(matches!(read_plane(text.as_bytes(), 2, 3), Err(RasterError::Shape { .. })));
        assert!(matches!(read_plane("1,2\n".as_bytes(), 2, 2), Err(RasterError::Shape { .. })));
        assert!(matches!(read_plane("1,x\n".as_bytes(), 1, 2), Err(RasterError::Number(_))));
    }
}
