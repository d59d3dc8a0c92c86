//! Split-conformal prediction sets from clusterings.
//!
//! A fitted clustering defines a residual function; the conformal quantile
//! of the calibration residuals turns its sublevel set into a prediction
//! region with distribution-free coverage `P(Y in C) >= 1 - alpha`. For
//! every residual kind here the sublevel set has an explicit form, a union
//! of balls or ellipsoids, and the component radii are derived algebraically
//! from `{y : residual(y) <= threshold}` so that the geometry and the
//! residual agree pointwise.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gauss::{GaussComps, LN_2PI};
use crate::geometry::{Ball, Ellipsoid, Geometry};
use crate::kmeans::{GeneralModel, SphereModel};
use crate::levelset::LevelSetModel;

/// The residual families supported by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `min_j ||y - c_j||` over k-means centers.
    PlainDistance,
    /// `min_j [ ||y-c_j||^2 / sigma_j^2 + 2 d log sigma_j - 2 log pi_j ]`.
    WeightedSphere,
    /// `min_j 1 / (pi_j phi(y; mu_j, Sigma_j))`.
    GmmInverseDensity,
    /// `min_j [ (1/2) M_j(y) + (1/2) log det Sigma_j - log pi_j ]`.
    GmmLogForm,
    /// `min_j [ M_j(y) + log det Sigma_j - 2 log pi_j ]`, the max-mixture
    /// level-set score.
    MaxmixScore,
    /// `min_j ||y - Y_j||` over kept level-set points.
    LevelsetDistance,
    /// `min_j ||y - Y_j|| sqrt(p_hat(Y_j))` over kept level-set points.
    LevelsetAdaptive,
}

impl ResidualKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidualKind::PlainDistance => "plain_distance",
            ResidualKind::WeightedSphere => "weighted_sphere",
            ResidualKind::GmmInverseDensity => "gmm_inverse_density",
            ResidualKind::GmmLogForm => "gmm_log_form",
            ResidualKind::MaxmixScore => "maxmix_score",
            ResidualKind::LevelsetDistance => "levelset_distance",
            ResidualKind::LevelsetAdaptive => "levelset_adaptive",
        }
    }
}

enum ResidualImpl {
    Sphere { model: SphereModel, weighted: bool },
    Gauss { model: GeneralModel, comps: GaussComps, kind: ResidualKind },
    Levelset { model: LevelSetModel, adaptive: bool },
}

impl Clone for ResidualImpl {
    fn clone(&self) -> Self {
        match self {
            ResidualImpl::Sphere { model, weighted } => ResidualImpl::Sphere {
                model: model.clone(),
                weighted: *weighted,
            },
            ResidualImpl::Gauss { model, kind, .. } => ResidualImpl::Gauss {
                model: model.clone(),
                comps: GaussComps::from_model(model).expect("was factorizable on construction"),
                kind: *kind,
            },
            ResidualImpl::Levelset { model, adaptive } => ResidualImpl::Levelset {
                model: model.clone(),
                adaptive: *adaptive,
            },
        }
    }
}

/// A residual function: a pure, permutation-invariant score of how atypical
/// a point is under a model fit on the other data half.
pub struct ResidualFn {
    imp: ResidualImpl,
}

impl Clone for ResidualFn {
    fn clone(&self) -> Self {
        ResidualFn {
            imp: self.imp.clone(),
        }
    }
}

impl std::fmt::Debug for ResidualFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ResidualFn({})", self.kind().as_str())
    }
}

impl ResidualFn {
    pub fn plain_distance(model: SphereModel) -> Self {
        ResidualFn {
            imp: ResidualImpl::Sphere {
                model,
                weighted: false,
            },
        }
    }

    pub fn weighted_sphere(model: SphereModel) -> Self {
        ResidualFn {
            imp: ResidualImpl::Sphere {
                model,
                weighted: true,
            },
        }
    }

    pub fn gaussian(model: GeneralModel, kind: ResidualKind) -> Result<Self> {
        match kind {
            ResidualKind::GmmInverseDensity | ResidualKind::GmmLogForm | ResidualKind::MaxmixScore => {}
            other => {
                return Err(Error::invalid(
                    "kind",
                    format!("{} is not a Gaussian-model residual", other.as_str()),
                ))
            }
        }
        let comps = GaussComps::from_model(&model)?;
        Ok(ResidualFn {
            imp: ResidualImpl::Gauss { model, comps, kind },
        })
    }

    pub fn levelset(model: LevelSetModel, adaptive: bool) -> Self {
        ResidualFn {
            imp: ResidualImpl::Levelset { model, adaptive },
        }
    }

    pub fn kind(&self) -> ResidualKind {
        match &self.imp {
            ResidualImpl::Sphere { weighted: false, .. } => ResidualKind::PlainDistance,
            ResidualImpl::Sphere { weighted: true, .. } => ResidualKind::WeightedSphere,
            ResidualImpl::Gauss { kind, .. } => *kind,
            ResidualImpl::Levelset { adaptive: false, .. } => ResidualKind::LevelsetDistance,
            ResidualImpl::Levelset { adaptive: true, .. } => ResidualKind::LevelsetAdaptive,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.imp {
            ResidualImpl::Sphere { model, .. } => model.dim(),
            ResidualImpl::Gauss { model, .. } => model.dim(),
            ResidualImpl::Levelset { model, .. } => model.dim(),
        }
    }

    /// Evaluate the residual at a point.
    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        match &self.imp {
            ResidualImpl::Sphere {
                model,
                weighted: false,
            } => model
                .centers
                .iter()
                .map(|c| (y - c).norm())
                .fold(f64::INFINITY, f64::min),
            ResidualImpl::Sphere {
                model,
                weighted: true,
            } => {
                let d = model.dim() as f64;
                let mut best = f64::INFINITY;
                for j in 0..model.k() {
                    let sigma = model.sigmas[j];
                    let pi = model.weights[j];
                    let score = if sigma == 0.0 {
                        // Degenerate cluster: the limit sigma -> 0 keeps the
                        // center itself (score -inf) and excludes all else.
                        if y == &model.centers[j] {
                            f64::NEG_INFINITY
                        } else {
                            f64::INFINITY
                        }
                    } else if pi == 0.0 {
                        f64::INFINITY
                    } else {
                        (y - &model.centers[j]).norm_squared() / (sigma * sigma)
                            + 2.0 * d * sigma.ln()
                            - 2.0 * pi.ln()
                    };
                    best = best.min(score);
                }
                best
            }
            ResidualImpl::Gauss { comps, kind, .. } => match kind {
                ResidualKind::GmmLogForm => comps.min_half_score(y),
                ResidualKind::MaxmixScore => 2.0 * comps.min_half_score(y),
                ResidualKind::GmmInverseDensity => {
                    let best = (0..comps.k())
                        .map(|j| comps.log_pi_phi(j, y))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (-best).exp()
                }
                _ => unreachable!("constructor restricts kinds"),
            },
            ResidualImpl::Levelset { model, adaptive } => {
                if *adaptive {
                    model.adaptive_residual(y)
                } else {
                    model.distance_residual(y)
                }
            }
        }
    }
}

/// The finite-sample conformal quantile: the `ceil((m+1)(1-alpha))`-th
/// smallest of `m` residuals, or +inf when that rank exceeds `m`.
pub fn conformal_quantile(residuals: &[f64], alpha: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Empty("no calibration residuals"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(
            "alpha",
            format!("must lie strictly inside (0, 1), got {alpha}"),
        ));
    }
    let m = residuals.len();
    // ceil((m+1)(1-alpha)) = (m+1) - floor((m+1) alpha).
    let f = ((m + 1) as f64 * alpha).floor() as usize;
    let rank = m + 1 - f.min(m + 1);
    if rank > m {
        return Ok(f64::INFINITY);
    }
    let rank = rank.max(1);
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// A prediction set: explicit union-of-balls/ellipsoids geometry together
/// with the residual function and threshold that generated it. Membership
/// through the geometry coincides with `residual(y) <= threshold`.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub alpha: f64,
    pub threshold: f64,
    pub residual: ResidualFn,
    pub geometry: Geometry,
}

impl PredictionSet {
    pub fn dim(&self) -> usize {
        self.residual.dim()
    }

    /// Geometry-route membership test (closed sets: boundaries belong).
    pub fn membership(&self, y: &DVector<f64>) -> Result<bool> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(self.geometry.contains(y))
    }

    /// Residual-route membership test.
    pub fn residual_membership(&self, y: &DVector<f64>) -> Result<bool> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(self.residual.eval(y) <= self.threshold)
    }

    pub fn to_doc(&self) -> PredictionSetDoc {
        let components = match &self.geometry {
            Geometry::Balls(balls) => balls
                .iter()
                .map(|b| ComponentDoc::Ball {
                    center: b.center.iter().copied().collect(),
                    radius: if b.empty { 0.0 } else { b.radius },
                })
                .collect(),
            Geometry::Ellipsoids(es) => es
                .iter()
                .map(|e| ComponentDoc::Ellipsoid {
                    mu: e.center.iter().copied().collect(),
                    sigma: (0..e.shape.nrows())
                        .map(|r| (0..e.shape.ncols()).map(|c| e.shape[(r, c)]).collect())
                        .collect(),
                    r2: if e.empty { 0.0 } else { e.r2 },
                })
                .collect(),
        };
        PredictionSetDoc {
            alpha: self.alpha,
            threshold: self.threshold,
            kind: self.residual.kind(),
            components,
        }
    }
}

/// JSON document form of a prediction set. Empty components are recorded
/// with radius (or squared radius) zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSetDoc {
    pub alpha: f64,
    pub threshold: f64,
    pub kind: ResidualKind,
    pub components: Vec<ComponentDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentDoc {
    Ball { center: Vec<f64>, radius: f64 },
    Ellipsoid { mu: Vec<f64>, sigma: Vec<Vec<f64>>, r2: f64 },
}

impl PredictionSetDoc {
    /// Rebuild the explicit geometry (for plotting and reloading artifacts;
    /// zero radii read back as empty components).
    pub fn to_geometry(&self) -> Result<Geometry> {
        let mut balls = Vec::new();
        let mut ellipsoids = Vec::new();
        for c in &self.components {
            match c {
                ComponentDoc::Ball { center, radius } => {
                    let center = DVector::from_vec(center.clone());
                    if *radius > 0.0 {
                        balls.push(Ball::new(center, *radius));
                    } else {
                        balls.push(Ball::empty(center));
                    }
                }
                ComponentDoc::Ellipsoid { mu, sigma, r2 } => {
                    let center = DVector::from_vec(mu.clone());
                    let d = center.len();
                    let flat: Vec<f64> = sigma.iter().flatten().copied().collect();
                    let shape = nalgebra::DMatrix::from_row_slice(d, d, &flat);
                    if *r2 > 0.0 {
                        ellipsoids.push(Ellipsoid::new(center, shape, *r2)?);
                    } else {
                        ellipsoids.push(Ellipsoid::empty(center, shape));
                    }
                }
            }
        }
        match (balls.is_empty(), ellipsoids.is_empty()) {
            (false, true) => Ok(Geometry::Balls(balls)),
            (true, false) => Ok(Geometry::Ellipsoids(ellipsoids)),
            _ => Err(Error::invalid(
                "components",
                "expected a homogeneous, nonempty component list",
            )),
        }
    }
}

/// Algorithm: k-means centers to a union of spheres.
///
/// With `weighted = false` every ball gets the common radius `t_alpha`; with
/// `weighted = true` each ball gets `r_j = sigma_j sqrt([t_alpha +
/// 2 log pi_j - 2 d log sigma_j]_+)`, clamped components becoming empty.
pub fn k_spheres(
    model: &SphereModel,
    calib: &Dataset,
    alpha: f64,
    weighted: bool,
) -> Result<PredictionSet> {
    if calib.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: calib.dim(),
        });
    }
    let residual = if weighted {
        ResidualFn::weighted_sphere(model.clone())
    } else {
        ResidualFn::plain_distance(model.clone())
    };
    let scores: Vec<f64> = calib.iter().map(|p| residual.eval(p)).collect();
    let threshold = conformal_quantile(&scores, alpha)?;

    let d = model.dim() as f64;
    let balls: Vec<Ball> = (0..model.k())
        .map(|j| {
            let center = model.centers[j].clone();
            if !weighted {
                return Ball::new(center, threshold);
            }
            let sigma = model.sigmas[j];
            if sigma == 0.0 {
                // Kept as a zero-radius ball: the limit residual keeps the
                // center itself.
                return Ball::new(center, 0.0);
            }
            let pi = model.weights[j];
            let arg = threshold + 2.0 * pi.ln() - 2.0 * d * sigma.ln();
            if arg < 0.0 || arg.is_nan() {
                Ball::empty(center)
            } else {
                Ball::new(center, sigma * arg.sqrt())
            }
        })
        .collect();

    Ok(PredictionSet {
        alpha,
        threshold,
        residual,
        geometry: Geometry::Balls(balls),
    })
}

/// Gaussian-model residuals to a union of ellipsoids. The per-component
/// squared Mahalanobis radius is derived algebraically from
/// `{residual <= threshold}` for the chosen residual kind.
pub fn k_ellipsoids(
    model: &GeneralModel,
    calib: &Dataset,
    alpha: f64,
    kind: ResidualKind,
) -> Result<PredictionSet> {
    if calib.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: calib.dim(),
        });
    }
    let residual = ResidualFn::gaussian(model.clone(), kind)?;
    let scores: Vec<f64> = calib.iter().map(|p| residual.eval(p)).collect();
    let threshold = conformal_quantile(&scores, alpha)?;

    let comps = GaussComps::from_model(model)?;
    let d = model.dim() as f64;
    let mut ellipsoids = Vec::with_capacity(model.k());
    for j in 0..model.k() {
        let log_det = comps.comps[j].log_det;
        let log_pi = comps.comps[j].log_pi;
        let r2 = match kind {
            ResidualKind::GmmLogForm => 2.0 * threshold - log_det + 2.0 * log_pi,
            ResidualKind::MaxmixScore => threshold - log_det + 2.0 * log_pi,
            ResidualKind::GmmInverseDensity => {
                2.0 * threshold.ln() + 2.0 * log_pi - d * LN_2PI - log_det
            }
            _ => unreachable!("constructor restricts kinds"),
        };
        let center = model.means[j].clone();
        let shape = model.covariances[j].clone();
        if r2 < 0.0 || r2.is_nan() {
            ellipsoids.push(Ellipsoid::empty(center, shape));
        } else {
            ellipsoids.push(Ellipsoid::new(center, shape, r2)?);
        }
    }

    Ok(PredictionSet {
        alpha,
        threshold,
        residual,
        geometry: Geometry::Ellipsoids(ellipsoids),
    })
}

/// The full-conformal p-value `pi(y)` for testing `H0: Y = y`.
///
/// `residual_builder` maps the augmented dataset (with `y` appended as the
/// last row) to one residual per row and must be invariant to permutations
/// of the augmented rows.
pub fn full_conformal_pvalue<F>(data: &Dataset, y: &DVector<f64>, residual_builder: F) -> Result<f64>
where
    F: Fn(&Dataset) -> Vec<f64>,
{
    if y.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: y.len(),
        });
    }
    let mut points = data.points().to_vec();
    points.push(y.clone());
    let augmented = Dataset::new(points)?;
    let residuals = residual_builder(&augmented);
    let m = data.n() + 1;
    if residuals.len() != m {
        return Err(Error::invalid(
            "residual_builder",
            format!("returned {} residuals for {} rows", residuals.len(), m),
        ));
    }
    let r_new = residuals[m - 1];
    let count = residuals.iter().filter(|&&r| r >= r_new).count();
    Ok(count as f64 / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_blobs, split_half};
    use crate::geometry::Rect;
    use crate::kmeans::{lloyd, DEFAULT_MAX_ITER, DEFAULT_TOL};
    use crate::rng::{stream, Domain};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use rayon::prelude::*;

    #[test]
    fn quantile_order_statistic_arithmetic() {
        let r: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(conformal_quantile(&r, 0.5).unwrap(), 6.0);
        let all_equal = vec![3.25; 7];
        assert_eq!(conformal_quantile(&all_equal, 0.2).unwrap(), 3.25);
        // Rank beyond m: +infinity.
        assert_eq!(conformal_quantile(&[1.0, 2.0], 0.05).unwrap(), f64::INFINITY);
        assert!(conformal_quantile(&[], 0.5).is_err());
        assert!(conformal_quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn single_ball_radius_is_max_order_statistic() {
        // k=1 at the origin, calibration residuals {1..9}, alpha = 0.1:
        // rank ceil(10 * 0.9) = 9 picks the largest residual.
        let model = SphereModel {
            centers: vec![DVector::zeros(1)],
            sigmas: vec![1.0],
            weights: vec![1.0],
            counts: vec![9],
        };
        let calib =
            Dataset::from_rows((1..=9).map(|v| vec![v as f64]).collect()).unwrap();
        let set = k_spheres(&model, &calib, 0.1, false).unwrap();
        assert_eq!(set.threshold, 9.0);
        match &set.geometry {
            Geometry::Balls(balls) => assert_eq!(balls[0].radius, 9.0),
            _ => panic!("expected balls"),
        }
    }

    #[test]
    fn weighted_radius_follows_the_closed_form() {
        // sigma = 1, pi = 1, k = 1: residual is ||y||^2, so calibration
        // points with squared norms {0.5, 1, ..., 8} and alpha = 0.5 give
        // t = 4 and r = sqrt(4 + 0 - 0) = 2.
        let model = SphereModel {
            centers: vec![DVector::zeros(1)],
            sigmas: vec![1.0],
            weights: vec![1.0],
            counts: vec![9],
        };
        let sq = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let calib =
            Dataset::from_rows(sq.iter().map(|v| vec![v.sqrt()]).collect()).unwrap();
        let set = k_spheres(&model, &calib, 0.5, true).unwrap();
        assert_relative_eq!(set.threshold, 4.0, epsilon = 1e-12);
        match &set.geometry {
            Geometry::Balls(balls) => assert_relative_eq!(balls[0].radius, 2.0, epsilon = 1e-12),
            _ => panic!("expected balls"),
        }
    }

    fn blob_split(seed: u64) -> (Dataset, Dataset) {
        let centers = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![6.0, 1.0]),
            DVector::from_vec(vec![-2.0, 5.0]),
        ];
        let noise_box = Rect::new(vec![-5.0, -5.0], vec![10.0, 10.0]).unwrap();
        let data = gen_blobs(&centers, 60, 0.8, 15, &noise_box, seed).unwrap();
        let split = split_half(&data, seed).unwrap();
        (split.fit_half, split.calib_half)
    }

    // Sublevel-set oracle: geometry membership agrees with direct residual
    // evaluation over a dense grid.
    #[test]
    fn sphere_geometry_matches_residual_sublevel_set() {
        let (fit, calib) = blob_split(3);
        let model = lloyd(&fit, 5, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 3).unwrap();
        for weighted in [false, true] {
            let set = k_spheres(&model, &calib, 0.1, weighted).unwrap();
            let bb = fit.bounding_box();
            for ix in 0..100 {
                for iy in 0..100 {
                    let x = bb.lo()[0] + (bb.hi()[0] - bb.lo()[0]) * ix as f64 / 99.0;
                    let y = bb.lo()[1] + (bb.hi()[1] - bb.lo()[1]) * iy as f64 / 99.0;
                    let p = DVector::from_vec(vec![x, y]);
                    assert_eq!(
                        set.membership(&p).unwrap(),
                        set.residual_membership(&p).unwrap(),
                        "disagreement at ({x}, {y}), weighted={weighted}"
                    );
                }
            }
        }
    }

    #[test]
    fn standard_normal_log_form_gives_ball_of_squared_radius_2m() {
        let model = GeneralModel {
            weights: vec![1.0],
            means: vec![DVector::zeros(2)],
            covariances: vec![DMatrix::identity(2, 2)],
        };
        // Residual is ||y||^2 / 2, so calibration points at radius sqrt(2 v)
        // have residual v.
        let vals = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5];
        let calib = Dataset::from_rows(
            vals.iter().map(|v| vec![(2.0 * v).sqrt(), 0.0]).collect(),
        )
        .unwrap();
        let set = k_ellipsoids(&model, &calib, 0.5, ResidualKind::GmmLogForm).unwrap();
        let m = set.threshold;
        assert_relative_eq!(m, 2.5, epsilon = 1e-12);
        match &set.geometry {
            Geometry::Ellipsoids(es) => {
                assert_relative_eq!(es[0].r2, 2.0 * m, epsilon = 1e-12);
                assert!(!es[0].empty);
            }
            _ => panic!("expected ellipsoids"),
        }
    }

    // At k=1 the inverse-density and log-form residuals are monotone
    // transforms of the same Mahalanobis distance, so matched quantiles give
    // identical sets.
    #[test]
    fn inverse_density_and_log_form_agree_at_k1() {
        let (fit, calib) = blob_split(11);
        let model = crate::gmm::em_fit(&fit, 1, 1, 100, 1e-10, 0).unwrap();
        let inv = k_ellipsoids(&model, &calib, 0.1, ResidualKind::GmmInverseDensity).unwrap();
        let log = k_ellipsoids(&model, &calib, 0.1, ResidualKind::GmmLogForm).unwrap();
        let bb = fit.bounding_box();
        let mut rng = stream(5, Domain::Trial, 0);
        for _ in 0..2000 {
            let p = bb.sample(&mut rng);
            assert_eq!(inv.membership(&p).unwrap(), log.membership(&p).unwrap());
        }
    }

    #[test]
    fn pvalue_two_point_example() {
        // Mean residual |Y_i - Ybar| on {-1, 1} with y = 0: the augmented
        // mean is 0, R_3 = 0 is the minimum, so pi(0) = 1.
        let data = Dataset::from_rows(vec![vec![-1.0], vec![1.0]]).unwrap();
        let builder = |aug: &Dataset| {
            let mean: f64 = aug.iter().map(|p| p[0]).sum::<f64>() / aug.n() as f64;
            aug.iter().map(|p| (p[0] - mean).abs()).collect()
        };
        let p = full_conformal_pvalue(&data, &DVector::from_vec(vec![0.0]), builder).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn pvalue_with_one_point_is_half_or_one() {
        let data = Dataset::from_rows(vec![vec![2.0]]).unwrap();
        let builder = |aug: &Dataset| {
            let mean: f64 = aug.iter().map(|p| p[0]).sum::<f64>() / aug.n() as f64;
            aug.iter().map(|p| (p[0] - mean).abs()).collect()
        };
        for y in [0.0, 1.9, 2.0, 5.0] {
            let p = full_conformal_pvalue(&data, &DVector::from_vec(vec![y]), builder).unwrap();
            assert!(p == 0.5 || p == 1.0, "pi({y}) = {p}");
        }
    }

    fn normal_point(rng: &mut impl Rng) -> Vec<f64> {
        vec![StandardNormal.sample(rng), StandardNormal.sample(rng)]
    }

    // Monte Carlo coverage oracle for the split-conformal guarantee: over
    // repeated (fit, calibrate, fresh point) trials the fresh point falls in
    // the set with frequency >= 1 - alpha - 0.02.
    #[test]
    fn marginal_coverage_meets_the_guarantee() {
        let alpha = 0.1;
        let trials = 2000usize;
        let hits: usize = (0..trials)
            .into_par_iter()
            .filter(|&t| {
                let mut rng = stream(424, Domain::Trial, t as u64);
                let data =
                    Dataset::from_rows((0..40).map(|_| normal_point(&mut rng)).collect()).unwrap();
                let split = split_half(&data, t as u64).unwrap();
                let model =
                    lloyd(&split.fit_half, 2, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, t as u64).unwrap();
                let set = k_spheres(&model, &split.calib_half, alpha, true).unwrap();
                let fresh = DVector::from_vec(normal_point(&mut rng));
                set.membership(&fresh).unwrap()
            })
            .count();
        let coverage = hits as f64 / trials as f64;
        assert!(
            coverage >= 1.0 - alpha - 0.02,
            "empirical coverage {coverage} below guarantee"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        // alpha' < alpha implies a superset, pointwise.
        #[test]
        fn sets_grow_as_alpha_shrinks(seed in 0u64..300) {
            let (fit, calib) = blob_split(seed);
            let model = lloyd(&fit, 4, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, seed).unwrap();
            let tight = k_spheres(&model, &calib, 0.2, true).unwrap();
            let loose = k_spheres(&model, &calib, 0.05, true).unwrap();
            let bb = fit.bounding_box();
            let mut rng = stream(seed, Domain::Trial, 1);
            for _ in 0..500 {
                let p = bb.sample(&mut rng);
                if tight.membership(&p).unwrap() {
                    prop_assert!(loose.membership(&p).unwrap());
                }
            }
        }
    }
}
