//! k-nearest-neighbor density level sets converted to conformal unions of
//! spheres.
//!
//! The kNN density estimate is `p_hat(x) = k / (n d_k(x))` with `d_k` the
//! distance to the k-th nearest reference point (the query itself counts
//! when it coincides with a reference point; zero distance means infinite
//! density). Thresholding the fitting half at a level `t` keeps the dense
//! points, and the conformal quantile of nearest-kept-point distances over
//! the calibration half turns the kept set into a union of balls of one
//! common radius, or of per-point radii `M / sqrt(p_hat(Y_j))` in the
//! adaptive variant.
//!
//! The kNN search is brute force, which is fine at this scale and easy to
//! swap out.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, PredictionSet, ResidualFn};
use crate::dataset::{Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::geometry::{Ball, Geometry};

/// kNN density values on the reference (fitting) points.
#[derive(Debug, Clone)]
pub struct KnnDensity {
    reference: Dataset,
    k_nn: usize,
    values: Vec<f64>,
}

impl KnnDensity {
    /// Evaluate the density at every reference point.
    pub fn fit(reference: Dataset, k_nn: usize) -> Result<Self> {
        check_k_nn(&reference, k_nn)?;
        let values = reference
            .iter()
            .map(|p| knn_density_unchecked(&reference, k_nn, p))
            .collect();
        Ok(KnnDensity {
            reference,
            k_nn,
            values,
        })
    }

    pub fn reference(&self) -> &Dataset {
        &self.reference
    }

    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_k_nn(reference: &Dataset, k_nn: usize) -> Result<()> {
    if k_nn == 0 || k_nn > reference.n() {
        return Err(Error::invalid(
            "k_nn",
            format!("must lie in 1..={}, got {k_nn}", reference.n()),
        ));
    }
    Ok(())
}

fn knn_density_unchecked(reference: &Dataset, k_nn: usize, query: &DVector<f64>) -> f64 {
    let mut dists: Vec<f64> = reference.iter().map(|p| (p - query).norm()).collect();
    let (_, kth, _) = dists.select_nth_unstable_by(k_nn - 1, f64::total_cmp);
    let dk = *kth;
    if dk == 0.0 {
        f64::INFINITY
    } else {
        k_nn as f64 / (reference.n() as f64 * dk)
    }
}

/// The kNN density estimate `p_hat(x) = k / (n d_k(x))` at an arbitrary
/// query point.
pub fn knn_density(reference: &Dataset, k_nn: usize, query: &DVector<f64>) -> Result<f64> {
    check_k_nn(reference, k_nn)?;
    if query.len() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            got: query.len(),
        });
    }
    Ok(knn_density_unchecked(reference, k_nn, query))
}

/// The empirical `q`-quantile (lower order statistic) of the density values,
/// used as the level `t`.
pub fn level_from_quantile(density: &KnnDensity, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(
            "q",
            format!("must lie strictly inside (0, 1), got {q}"),
        ));
    }
    let mut sorted = density.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[idx - 1])
}

/// Indices of the reference points at or above the level.
pub fn kept_indices(values: &[f64], t: f64) -> Vec<usize> {
    values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v >= t).then_some(i))
        .collect()
}

/// How the level `t` is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LevelSpec {
    Absolute(f64),
    /// Empirical quantile of the fitting-half density values.
    Quantile(f64),
}

/// Kept level-set points with the fitted radius. The non-adaptive set is a
/// union of balls of the single common radius `M`; the adaptive set uses
/// `M / sqrt(p_hat(Y_j))` per kept point.
#[derive(Debug, Clone)]
pub struct LevelSetModel {
    kept_points: Vec<DVector<f64>>,
    kept_densities: Vec<f64>,
    pub level: f64,
    pub radius: f64,
    pub adaptive: bool,
}

impl LevelSetModel {
    pub fn dim(&self) -> usize {
        self.kept_points[0].len()
    }

    pub fn kept_points(&self) -> &[DVector<f64>] {
        &self.kept_points
    }

    pub fn kept_densities(&self) -> &[f64] {
        &self.kept_densities
    }

    /// `min_j ||y - Y_j||` over kept points.
    pub(crate) fn distance_residual(&self, y: &DVector<f64>) -> f64 {
        self.kept_points
            .iter()
            .map(|p| (y - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// `min_j ||y - Y_j|| sqrt(p_hat(Y_j))`; an infinite-density point
    /// contributes 0 at itself and +inf elsewhere (the zero-radius limit).
    pub(crate) fn adaptive_residual(&self, y: &DVector<f64>) -> f64 {
        self.kept_points
            .iter()
            .zip(&self.kept_densities)
            .map(|(p, &dens)| {
                let d = (y - p).norm();
                if dens.is_infinite() {
                    if d == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    d * dens.sqrt()
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_doc(&self) -> LevelSetModelDoc {
        LevelSetModelDoc {
            kept_points: self
                .kept_points
                .iter()
                .map(|p| p.iter().copied().collect())
                .collect(),
            kept_densities: self.kept_densities.clone(),
            level: self.level,
            radius: self.radius,
            adaptive: self.adaptive,
        }
    }

    pub fn from_doc(doc: &LevelSetModelDoc) -> Result<Self> {
        if doc.kept_points.is_empty() {
            return Err(Error::Empty("level-set model keeps no points"));
        }
        Ok(LevelSetModel {
            kept_points: doc
                .kept_points
                .iter()
                .map(|p| DVector::from_vec(p.clone()))
                .collect(),
            kept_densities: doc.kept_densities.clone(),
            level: doc.level,
            radius: doc.radius,
            adaptive: doc.adaptive,
        })
    }
}

/// JSON document form of [`LevelSetModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetModelDoc {
    pub kept_points: Vec<Vec<f64>>,
    pub kept_densities: Vec<f64>,
    pub level: f64,
    pub radius: f64,
    pub adaptive: bool,
}

/// Convert a kNN density level set into a conformal union of spheres.
///
/// Fits the density on the fitting half, keeps the points at or above the
/// level, computes nearest-kept-point residuals on the calibration half and
/// thresholds them at the conformal quantile `M`.
pub fn level_set_spheres(
    split: &SplitPair,
    k_nn: usize,
    level: LevelSpec,
    alpha: f64,
    adaptive: bool,
) -> Result<PredictionSet> {
    let density = KnnDensity::fit(split.fit_half.clone(), k_nn)?;
    let t = match level {
        LevelSpec::Absolute(t) => t,
        LevelSpec::Quantile(q) => level_from_quantile(&density, q)?,
    };
    let kept = kept_indices(density.values(), t);
    if kept.is_empty() {
        return Err(Error::EmptyLevelSet { t });
    }
    let mut model = LevelSetModel {
        kept_points: kept
            .iter()
            .map(|&i| density.reference().point(i).clone())
            .collect(),
        kept_densities: kept.iter().map(|&i| density.values()[i]).collect(),
        level: t,
        radius: 0.0,
        adaptive,
    };

    let residuals: Vec<f64> = split
        .calib_half
        .iter()
        .map(|p| {
            if adaptive {
                model.adaptive_residual(p)
            } else {
                model.distance_residual(p)
            }
        })
        .collect();
    let m = conformal_quantile(&residuals, alpha)?;
    model.radius = m;

    let balls: Vec<Ball> = model
        .kept_points
        .iter()
        .zip(&model.kept_densities)
        .map(|(p, &dens)| {
            let radius = if !adaptive {
                m
            } else if dens.is_infinite() {
                0.0
            } else if m.is_infinite() {
                f64::INFINITY
            } else {
                m / dens.sqrt()
            };
            Ball::new(p.clone(), radius)
        })
        .collect();

    Ok(PredictionSet {
        alpha,
        threshold: m,
        residual: ResidualFn::levelset(model, adaptive),
        geometry: Geometry::Balls(balls),
    })
}
