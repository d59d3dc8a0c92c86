//! Datasets, CSV ingestion, the fit/calibration split and synthetic
//! generators.
//!
//! A [`Dataset`] is an n-by-d matrix of finite reals, one point per row.
//! [`split_half`] performs the uniformly random disjoint split that split
//! conformal prediction requires; everything downstream fits on one half and
//! calibrates on the other.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::rng::{stream, Domain};

/// An n-by-d collection of points with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<DVector<f64>>,
    dim: usize,
}

impl Dataset {
    /// Build a dataset from points, checking they are nonempty, of equal
    /// dimension and finite.
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("dataset has no points"));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::invalid("points", "dimension must be at least 1"));
        }
        for (row, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::RaggedRow {
                    row: row + 1,
                    expected: dim,
                    got: p.len(),
                });
            }
            for (col, v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row + 1,
                        col: col + 1,
                    });
                }
            }
        }
        Ok(Dataset { points, dim })
    }

    /// Build from plain row vectors.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows.into_iter().map(DVector::from_vec).collect())
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<f64>> {
        self.points.iter()
    }

    /// Tight axis-aligned bounding box of the points.
    pub fn bounding_box(&self) -> Rect {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in &self.points {
            for (i, v) in p.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        Rect::new(lo, hi).expect("finite points produce a valid box")
    }

    /// Dataset restricted to the given row indices (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            dim: self.dim,
        }
    }

    /// Resample `n` rows with replacement, driven by `rng`.
    pub(crate) fn resample(&self, rng: &mut impl Rng) -> Dataset {
        let n = self.n();
        let points = (0..n)
            .map(|_| self.points[rng.random_range(0..n)].clone())
            .collect();
        Dataset {
            points,
            dim: self.dim,
        }
    }
}

/// The two disjoint halves of a dataset produced by [`split_half`].
#[derive(Debug, Clone)]
pub struct SplitPair {
    /// Fitting half (gets the extra point when n is odd).
    pub fit_half: Dataset,
    /// Calibration half; its size drives the conformal quantile rule.
    pub calib_half: Dataset,
    /// Source row indices of the fitting half, ascending.
    pub fit_indices: Vec<usize>,
    /// Source row indices of the calibration half, ascending.
    pub calib_indices: Vec<usize>,
    pub seed: u64,
}

/// Uniformly random disjoint split of `data` into a fitting half of size
/// ceil(n/2) and a calibration half of size floor(n/2), determined entirely
/// by `seed`.
pub fn split_half(data: &Dataset, seed: u64) -> Result<SplitPair> {
    let n = data.n();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, have: n });
    }
    let mut rng = stream(seed, Domain::Split, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates keyed by the stream only.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_fit = n.div_ceil(2);
    let mut fit_indices: Vec<usize> = idx[..n_fit].to_vec();
    let mut calib_indices: Vec<usize> = idx[n_fit..].to_vec();
    fit_indices.sort_unstable();
    calib_indices.sort_unstable();
    Ok(SplitPair {
        fit_half: data.subset(&fit_indices),
        calib_half: data.subset(&calib_indices),
        fit_indices,
        calib_indices,
        seed,
    })
}

/// Read a dataset from a CSV file of decimal floats, one point per row.
///
/// Accepts LF or CRLF line endings. `has_header` skips a single header row.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut expected_cols: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| io_error(path, e))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(rows.len() + 1);
        let cols = record.len();
        match expected_cols {
            None => expected_cols = Some(cols),
            Some(expected) if expected != cols => {
                return Err(Error::RaggedRow {
                    row: line,
                    expected,
                    got: cols,
                });
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(cols);
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row: line,
                col: col + 1,
                value: field.to_string(),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    row: line,
                    col: col + 1,
                });
            }
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("csv file contains no data rows"));
    }
    Dataset::from_rows(rows)
}

/// Write a dataset as CSV. Values use the shortest decimal form that parses
/// back to the same float, so `load_csv(write_csv(d)) == d` bit for bit.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut buf = String::new();
    if header {
        let names: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
        buf.push_str(&names.join(","));
        buf.push('\n');
    }
    for p in data.iter() {
        let fields: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        buf.push_str(&fields.join(","));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn io_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.display().to_string(),
            source,
        },
        other => Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Isotropic Gaussian blobs around `centers` plus uniform background noise.
///
/// Draws `per_blob` points from N(center, sigma^2 I) for each center in
/// order, then `noise_n` uniform points on `noise_box`. Pure function of its
/// arguments including `seed`. The box is only validated (all sides strictly
/// positive) when noise points are requested.
pub fn gen_blobs(
    centers: &[DVector<f64>],
    per_blob: usize,
    sigma: f64,
    noise_n: usize,
    noise_box: &Rect,
    seed: u64,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::Empty("gen_blobs needs at least one center"));
    }
    let dim = centers[0].len();
    if centers.iter().any(|c| c.len() != dim) {
        return Err(Error::invalid("centers", "centers differ in dimension"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    if noise_n > 0 {
        if noise_box.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: noise_box.dim(),
            });
        }
        if (0..dim).any(|i| noise_box.side(i) <= 0.0) {
            return Err(Error::invalid(
                "noise_box",
                "degenerate box: every side must have positive length",
            ));
        }
    }

    let mut rng = stream(seed, Domain::Blobs, 0);
    let normal = StandardNormal;
    let mut points = Vec::with_capacity(centers.len() * per_blob + noise_n);
    for center in centers {
        for _ in 0..per_blob {
            let z = DVector::from_fn(dim, |_, _| normal.sample(&mut rng));
            points.push(center + sigma * z);
        }
    }
    for _ in 0..noise_n {
        points.push(noise_box.sample(&mut rng));
    }
    Dataset::new(points)
}

/// Noisy circular arcs in the plane, interleaved like crescent moons.
///
/// Arc `a` is a half circle of radius `radius` centered at
/// `(a * radius, (a odd) * radius/2)`, opening downward for even `a` and
/// upward for odd `a`. Points get a uniform radial jitter in
/// `[-thickness, thickness]`, so every point lies within `radius +/-
/// thickness` of its arc center. Deterministic in `seed`.
pub fn gen_crescents(
    arcs: usize,
    per_arc: usize,
    radius: f64,
    thickness: f64,
    seed: u64,
) -> Result<Dataset> {
    if arcs == 0 {
        return Err(Error::invalid("arcs", "must be at least 1"));
    }
    if per_arc == 0 {
        return Err(Error::invalid("per_arc", "must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", format!("must be > 0, got {radius}")));
    }
    if !(thickness > 0.0) {
        return Err(Error::invalid(
            "thickness",
            format!("must be > 0, got {thickness}"),
        ));
    }

    let mut rng = stream(seed, Domain::Crescents, 0);
    let mut points = Vec::with_capacity(arcs * per_arc);
    for a in 0..arcs {
        let cx = a as f64 * radius;
        let cy = if a % 2 == 1 { 0.5 * radius } else { 0.0 };
        let phase = if a % 2 == 1 { std::f64::consts::PI } else { 0.0 };
        for _ in 0..per_arc {
            let theta = phase + std::f64::consts::PI * rng.random::<f64>();
            let r = radius + thickness * (2.0 * rng.random::<f64>() - 1.0);
            points.push(DVector::from_vec(vec![
                cx + r * theta.cos(),
                cy + r * theta.sin(),
            ]));
        }
    }
    Dataset::new(points)
}
