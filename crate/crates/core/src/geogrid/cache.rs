//! Resolution-keyed text cache for precomputed geographic features.
//!
//! One file per `(scenario id, resolution)`:
//!
//! ```text
//! searchgrid-feature-cache v1
//! scenario <id>
//! resolution <meters>
//! fingerprint <sha256 of grid + vocabulary + layers>
//! shape <n_rows> <n_cols> <n_planes>
//! plane <feature name>
//! <n_rows lines of comma-separated values, row 0 first>
//! plane <feature name>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! reload is bit-identical to what was stored. A fingerprint mismatch is
//! treated as a miss.

use super::{FeatureMatrix, GeoLayer, GridSpec};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &str = "searchgrid-feature-cache v1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt cache file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheKey {
    pub scenario_id: String,
    pub resolution: f64,
    pub fingerprint: String,
}

impl CacheKey {
    pub fn new(scenario_id: &str, grid: &GridSpec, vocabulary: &[String], layers: &[GeoLayer]) -> Self {
        Self {
            scenario_id: scenario_id.to_string(),
            resolution: grid.resolution,
            fingerprint: fingerprint(grid, vocabulary, layers),
        }
    }

    pub fn file_name(&self) -> String {
        let id: String = self
            .scenario_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{id}@{}m.phi", self.resolution)
    }
}

pub fn fingerprint(grid: &GridSpec, vocabulary: &[String], layers: &[GeoLayer]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(grid).expect("grid serializes"));
    h.update(serde_json::to_vec(vocabulary).expect("vocabulary serializes"));
    h.update(serde_json::to_vec(layers).expect("layers serialize"));
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn store(dir: &Path, key: &CacheKey, grid: &GridSpec, features: &FeatureMatrix) -> Result<PathBuf, CacheError> {
    fs::create_dir_all(dir)?;
    let phi = features.phi();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "scenario {}", key.scenario_id);
    let _ = writeln!(out, "resolution {}", key.resolution);
    let _ = writeln!(out, "fingerprint {}", key.fingerprint);
    let _ = writeln!(out, "shape {} {} {}", grid.n_rows, grid.n_cols, phi.ncols());
    for (f, name) in features.phi_names().iter().enumerate() {
        let _ = writeln!(out, "plane {name}");
        for r in 0..grid.n_rows {
            let line: Vec<String> = (0..grid.n_cols)
                .map(|c| phi[(r * grid.n_cols + c, f)].to_string())
                .collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
    }
    let path = dir.join(key.file_name());
    // write-then-rename so concurrent readers never see a partial file
    let tmp = path.with_extension("phi.tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Loads cached features; `Ok(None)` on a miss or a stale fingerprint.
pub fn load(dir: &Path, key: &CacheKey, grid: &GridSpec) -> Result<Option<FeatureMatrix>, CacheError> {
    let path = dir.join(key.file_name());
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let corrupt = |reason: &str| CacheError::Corrupt {
        path: path.clone(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("bad header"));
    }
    let field = |lines: &mut std::str::Lines<'_>, name: &str| -> Result<String, CacheError> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .and_then(|l| l.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| corrupt(&format!("missing `{name}`")))
    };
    let _scenario = field(&mut lines, "scenario")?;
    let _resolution = field(&mut lines, "resolution")?;
    let fp = field(&mut lines, "fingerprint")?;
    if fp != key.fingerprint {
        return Ok(None);
    }
    let shape: Vec<usize> = field(&mut lines, "shape")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| corrupt("bad shape")))
        .collect::<Result<_, _>>()?;
    if shape.len() != 3 || shape[0] != grid.n_rows || shape[1] != grid.n_cols {
        return Ok(None);
    }
    let n_planes = shape[2];
    let mut phi = DMatrix::zeros(grid.n_cells(), n_planes);
    let mut names = Vec::with_capacity(n_planes);
    for f in 0..n_planes {
        names.push(field(&mut lines, "plane")?);
        for r in 0..grid.n_rows {
            let line = lines.next().ok_or_else(|| corrupt("truncated plane"))?;
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.parse().map_err(|_| corrupt("bad value")))
                .collect::<Result<_, _>>()?;
            if vals.len() != grid.n_cols {
                return Err(corrupt("row width mismatch"));
            }
            for (c, v) in vals.into_iter().enumerate() {
                phi[(r * grid.n_cols + c, f)] = v;
            }
        }
    }
    Ok(Some(FeatureMatrix::new(phi, names)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{adjacency_features, Geometry};
    use crate::geometry::Vec2;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(4, 5, 30.0, Vec2::new(10.0, -3.0)).unwrap();
        let vocab = vec!["roads".to_string(), "trails".to_string()];
        let layers = vec![GeoLayer::new(
            "trails",
            vec![Geometry::Polyline {
                coords: vec![Vec2::new(0.0, 0.0), Vec2::new(97.3, 61.1)],
            }],
        )];
        let fm = adjacency_features(&grid, &vocab, &layers).unwrap();
        let key = CacheKey::new("demo scenario", &grid, &vocab, &layers);
        store(dir.path(), &key, &grid, &fm).unwrap();
        let back = load(dir.path(), &key, &grid).unwrap().unwrap();
        assert_eq!(back, fm);

        let mut stale = key.clone();
        stale.fingerprint = "0".repeat(64);
        assert!(load(dir.path(), &stale, &grid).unwrap().is_none());
    }

    #[test]
    fn missing_file_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(1, 1, 1.0, Vec2::default()).unwrap();
        let key = CacheKey::new("x", &grid, &[], &[]);
        assert!(load(dir.path(), &key, &grid).unwrap().is_none());
    }
}
