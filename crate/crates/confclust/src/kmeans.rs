//! Lloyd's algorithm for ordinary k-means, and the generalized Lloyd's
//! algorithm that minimizes the hard-assignment Gaussian objective
//!
//! ```text
//! l_kM(theta) = (1/n) sum_i min_j [ (1/2)(Y_i-mu_j)' Sigma_j^{-1} (Y_i-mu_j)
//!                                   + (1/2) log det Sigma_j - log pi_j ]
//! ```
//!
//! Both fitters use D^2 ("k-means++") seeding, run `restarts` independent
//! initializations in parallel and return the best run by final objective.
//! Internally points are processed in a canonical (lexicographic) order, so
//! permuting input rows changes nothing but point labels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gauss::GaussComps;
use crate::rng::{stream, Domain};

/// Default iteration cap for all iterative fitters.
pub const DEFAULT_MAX_ITER: usize = 200;
/// Default relative-decrease convergence tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Fitted k-means model augmented with per-cluster spread and share.
///
/// `sigmas[j]^2 = n_j^{-1} sum_{i in j} ||Y_i - Ybar_j||^2` and
/// `weights[j] = n_j / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereModel {
    pub centers: Vec<DVector<f64>>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SphereModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn to_doc(&self) -> SphereModelDoc {
        SphereModelDoc {
            k: self.k(),
            centers: self.centers.iter().map(|c| c.iter().copied().collect()).collect(),
            sigmas: self.sigmas.clone(),
            weights: self.weights.clone(),
            counts: self.counts.clone(),
        }
    }

    pub fn from_doc(doc: &SphereModelDoc) -> Result<Self> {
        if doc.centers.is_empty() {
            return Err(Error::Empty("sphere model has no centers"));
        }
        let model = SphereModel {
            centers: doc.centers.iter().map(|c| DVector::from_vec(c.clone())).collect(),
            sigmas: doc.sigmas.clone(),
            weights: doc.weights.clone(),
            counts: doc.counts.clone(),
        };
        if model.sigmas.len() != model.k()
            || model.weights.len() != model.k()
            || model.counts.len() != model.k()
        {
            return Err(Error::invalid("model", "field lengths disagree with k"));
        }
        Ok(model)
    }
}

/// JSON document form of [`SphereModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereModelDoc {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Weighted Gaussian components `{pi_j, mu_j, Sigma_j}`, the parameter set
/// shared by generalized k-means, EM and the max-mixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GeneralModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn to_doc(&self) -> GeneralModelDoc {
        GeneralModelDoc {
            k: self.k(),
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|r| (0..c.ncols()).map(|cc| c[(r, cc)]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &GeneralModelDoc) -> Result<Self> {
        if doc.means.is_empty() {
            return Err(Error::Empty("general model has no components"));
        }
        let d = doc.means[0].len();
        let covariances = doc
            .covariances
            .iter()
            .map(|rows| {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                DMatrix::from_row_slice(d, d, &flat)
            })
            .collect();
        let model = GeneralModel {
            weights: doc.weights.clone(),
            means: doc.means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            covariances,
        };
        if model.weights.len() != model.k() || model.covariances.len() != model.k() {
            return Err(Error::invalid("model", "field lengths disagree with k"));
        }
        Ok(model)
    }
}

/// JSON document form of [`GeneralModel`]; covariances are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralModelDoc {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

fn check_fit_args(data: &Dataset, k: usize, restarts: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k > data.n() {
        return Err(Error::TooFewPoints {
            needed: k,
            have: data.n(),
        });
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts", "must be at least 1"));
    }
    Ok(())
}

/// Clone the points in canonical (lexicographic) order. Fitting walks this
/// order, which makes the fitted parameters invariant to row permutations.
fn canonical_points(data: &Dataset) -> Vec<DVector<f64>> {
    let mut idx: Vec<usize> = (0..data.n()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (data.point(a), data.point(b));
        for i in 0..pa.len() {
            match pa[i].total_cmp(&pb[i]) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx.into_iter().map(|i| data.point(i).clone()).collect()
}

/// D^2 seeding: first center uniform, then each next center drawn with
/// probability proportional to the squared distance to the nearest chosen
/// center.
fn kmeanspp(points: &[DVector<f64>], k: usize, rng: &mut ChaCha12Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining distances are zero (duplicate-heavy data).
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (i, p) in points.iter().enumerate() {
            let dd = (p - &c).norm_squared();
            if dd < d2[i] {
                d2[i] = dd;
            }
        }
        centers.push(c);
    }
    centers
}

fn assign_nearest(points: &[DVector<f64>], centers: &[DVector<f64>]) -> (Vec<usize>, Vec<f64>) {
    let mut assignment = vec![0usize; points.len()];
    let mut dist2 = vec![0.0f64; points.len()];
    for (i, p) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, c) in centers.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best {
                best = d;
                best_j = j;
            }
        }
        assignment[i] = best_j;
        dist2[i] = best;
    }
    (assignment, dist2)
}

/// Re-seed each empty cluster at the point carrying the largest current
/// residual. Points with score at or below `min_useful` are never stolen
/// (for plain k-means a zero distance carries no information). Scores of
/// stolen points are lowered to -inf so successive repairs pick distinct
/// points.
fn repair_empty(assignment: &mut [usize], score: &mut [f64], counts: &mut [usize], min_useful: f64) {
    let k = counts.len();
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut pick = None;
        for (i, &s) in score.iter().enumerate() {
            if s > best && s > min_useful && counts[assignment[i]] > 1 {
                best = s;
                pick = Some(i);
            }
        }
        let Some(i) = pick else { continue };
        counts[assignment[i]] -= 1;
        assignment[i] = j;
        counts[j] = 1;
        score[i] = f64::NEG_INFINITY;
    }
}

struct LloydRun {
    centers: Vec<DVector<f64>>,
    assignment: Vec<usize>,
    trace: Vec<f64>,
}

fn run_lloyd(points: &[DVector<f64>], k: usize, max_iter: usize, tol: f64, mut rng: ChaCha12Rng) -> LloydRun {
    let n = points.len();
    let dim = points[0].len();
    let mut centers = kmeanspp(points, k, &mut rng);
    let mut trace: Vec<f64> = Vec::new();
    let mut iter = 0usize;
    loop {
        let (mut assignment, mut d2) = assign_nearest(points, &centers);
        let obj = d2.iter().sum::<f64>() / n as f64;
        let converged = matches!(trace.last(), Some(&prev) if {
            let dec = prev - obj;
            dec >= 0.0 && dec <= tol * prev.abs().max(1e-12)
        });
        trace.push(obj);
        if converged || iter >= max_iter {
            return LloydRun {
                centers,
                assignment,
                trace,
            };
        }
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        repair_empty(&mut assignment, &mut d2, &mut counts, 0.0);
        let mut sums = vec![DVector::<f64>::zeros(dim); k];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]] += p;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            }
        }
        iter += 1;
    }
}

/// Ordinary k-means via Lloyd's algorithm; best of `restarts` seeded runs.
pub fn lloyd(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<SphereModel> {
    lloyd_traced(data, k, restarts, max_iter, tol, seed).map(|(m, _)| m)
}

/// [`lloyd`] returning also the within-SS trace of the winning run, one entry
/// per iteration, non-increasing (up to empty-cluster repairs).
pub fn lloyd_traced(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(SphereModel, Vec<f64>)> {
    check_fit_args(data, k, restarts)?;
    let points = canonical_points(data);
    let runs: Vec<(usize, LloydRun)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let rng = stream(seed, Domain::KmeansInit, r as u64);
            (r, run_lloyd(&points, k, max_iter, tol, rng))
        })
        .collect();
    let (_, best) = runs
        .into_iter()
        .min_by(|(ra, a), (rb, b)| {
            let (oa, ob) = (final_obj(&a.trace), final_obj(&b.trace));
            oa.total_cmp(&ob).then(ra.cmp(rb))
        })
        .expect("restarts >= 1");

    let n = points.len();
    let dim = data.dim();
    let mut counts = vec![0usize; k];
    for &a in &best.assignment {
        counts[a] += 1;
    }
    let mut means = vec![DVector::<f64>::zeros(dim); k];
    for (i, p) in points.iter().enumerate() {
        means[best.assignment[i]] += p;
    }
    let mut centers = Vec::with_capacity(k);
    for j in 0..k {
        if counts[j] > 0 {
            centers.push(&means[j] / counts[j] as f64);
        } else {
            centers.push(best.centers[j].clone());
        }
    }
    let mut sq = vec![0.0f64; k];
    for (i, p) in points.iter().enumerate() {
        sq[best.assignment[i]] += (p - &centers[best.assignment[i]]).norm_squared();
    }
    let sigmas: Vec<f64> = (0..k)
        .map(|j| if counts[j] > 0 { (sq[j] / counts[j] as f64).sqrt() } else { 0.0 })
        .collect();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok((
        SphereModel {
            centers,
            sigmas,
            weights,
            counts,
        },
        best.trace,
    ))
}

fn final_obj(trace: &[f64]) -> f64 {
    let v = *trace.last().expect("trace has at least one entry");
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Average squared distance to the nearest center:
/// `R(k) = (1/n) sum_i min_j ||Y_i - c_j||^2`.
pub fn within_ss(data: &Dataset, model: &SphereModel) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let total: f64 = data
        .iter()
        .map(|p| {
            model
                .centers
                .iter()
                .map(|c| (p - c).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / data.n() as f64)
}

/// Covariance ridge: bump the diagonal whenever the smallest eigenvalue
/// falls below `1e-8 * trace/d`. For zero-trace (singleton) clusters the
/// floor falls back to the global data scale.
pub(crate) fn ridge_covariance(mut cov: DMatrix<f64>, global_scale: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let mut floor = 1e-8 * cov.trace() / d as f64;
    if !(floor > 0.0) {
        floor = (1e-8 * global_scale).max(1e-300);
    }
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_eig >= floor) {
        for i in 0..d {
            cov[(i, i)] += floor;
        }
    }
    cov
}

pub(crate) fn mle_covariance(
    points: &[DVector<f64>],
    pick: impl Fn(usize) -> bool,
    mean: &DVector<f64>,
    count: usize,
) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (i, p) in points.iter().enumerate() {
        if pick(i) {
            let diff = p - mean;
            cov.syger(1.0, &diff, &diff, 1.0);
        }
    }
    if count > 0 {
        cov /= count as f64;
    }
    // syger fills the lower triangle; mirror it.
    for r in 0..d {
        for c in (r + 1)..d {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    cov
}

pub(crate) fn global_covariance(points: &[DVector<f64>]) -> (DMatrix<f64>, f64) {
    let d = points[0].len();
    let n = points.len();
    let mut mean = DVector::<f64>::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n as f64;
    let cov = mle_covariance(points, |_| true, &mean, n);
    let scale = cov.trace() / d as f64;
    (cov, scale)
}

/// Hard assignment of each point to the component minimizing the penalized
/// Mahalanobis score; ties break toward the lowest component index.
pub fn hard_assignments(data: &Dataset, model: &GeneralModel) -> Result<Vec<usize>> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let comps = GaussComps::from_model(model)?;
    Ok(data
        .iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for j in 0..comps.k() {
                let s = comps.half_score(j, p);
                if s < best {
                    best = s;
                    best_j = j;
                }
            }
            best_j
        })
        .collect())
}

fn run_gen_lloyd(
    points: &[DVector<f64>],
    k: usize,
    max_iter: usize,
    tol: f64,
    global_cov: &DMatrix<f64>,
    global_scale: f64,
    mut rng: ChaCha12Rng,
) -> Result<(GeneralModel, Vec<f64>)> {
    let n = points.len();
    let dim = points[0].len();
    let means = kmeanspp(points, k, &mut rng);
    let mut model = GeneralModel {
        weights: vec![1.0 / k as f64; k],
        means,
        covariances: vec![ridge_covariance(global_cov.clone(), global_scale); k],
    };
    let mut trace: Vec<f64> = Vec::new();
    let mut iter = 0usize;
    loop {
        let comps = GaussComps::from_model(&model)?;
        let mut assignment = vec![0usize; n];
        let mut min_score = vec![0.0f64; n];
        for (i, p) in points.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for j in 0..k {
                let s = comps.half_score(j, p);
                if s < best {
                    best = s;
                    best_j = j;
                }
            }
            assignment[i] = best_j;
            min_score[i] = best;
        }
        let obj = min_score.iter().sum::<f64>() / n as f64;
        let converged = matches!(trace.last(), Some(&prev) if {
            let dec = prev - obj;
            dec >= 0.0 && dec <= tol * prev.abs().max(1e-12)
        });
        trace.push(obj);
        if converged || iter >= max_iter {
            return Ok((model, trace));
        }
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        repair_empty(&mut assignment, &mut min_score, &mut counts, f64::NEG_INFINITY);
        for j in 0..k {
            if counts[j] == 0 {
                model.weights[j] = 0.0;
                continue;
            }
            let mut mean = DVector::<f64>::zeros(dim);
            for (i, p) in points.iter().enumerate() {
                if assignment[i] == j {
                    mean += p;
                }
            }
            mean /= counts[j] as f64;
            let cov = mle_covariance(points, |i| assignment[i] == j, &mean, counts[j]);
            model.means[j] = mean;
            model.covariances[j] = ridge_covariance(cov, global_scale);
            model.weights[j] = counts[j] as f64 / n as f64;
        }
        iter += 1;
    }
}

/// Generalized Lloyd's algorithm: hard assignment by penalized Mahalanobis
/// score, then mean / covariance / weight updates, repeated to convergence.
pub fn generalized_lloyd(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<GeneralModel> {
    generalized_lloyd_traced(data, k, restarts, max_iter, tol, seed).map(|(m, _)| m)
}

/// [`generalized_lloyd`] returning also the `l_kM` trace of the winning run.
pub fn generalized_lloyd_traced(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(GeneralModel, Vec<f64>)> {
    check_fit_args(data, k, restarts)?;
    let points = canonical_points(data);
    let (global_cov, global_scale) = global_covariance(&points);
    let runs: Vec<(usize, Result<(GeneralModel, Vec<f64>)>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let rng = stream(seed, Domain::GenLloyd, r as u64);
            (r, run_gen_lloyd(&points, k, max_iter, tol, &global_cov, global_scale, rng))
        })
        .collect();
    let mut best: Option<(f64, usize, (GeneralModel, Vec<f64>))> = None;
    let mut first_err: Option<Error> = None;
    for (r, run) in runs {
        match run {
            Ok(out) => {
                let obj = final_obj(&out.1);
                let better = match &best {
                    None => true,
                    Some((bo, br, _)) => obj < *bo || (obj == *bo && r < *br),
                };
                if better {
                    best = Some((obj, r, out));
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some((_, _, out)) => Ok(out),
        None => Err(first_err.expect("restarts >= 1 implies at least one result")),
    }
}

/// Exact value of the hard-assignment objective `l_kM` for a fitted model.
pub fn ell_km(data: &Dataset, model: &GeneralModel) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let comps = GaussComps::from_model(model)?;
    let total: f64 = data.iter().map(|p| comps.min_half_score(p)).sum();
    Ok(total / data.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, Domain::Trial, 99);
        Dataset::from_rows(
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn k1_center_is_mean() {
        let data = Dataset::from_rows(vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]]).unwrap();
        let model = lloyd(&data, 1, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, 0).unwrap();
        assert_relative_eq!(model.centers[0][0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(model.centers[0][1], 2.0, epsilon = 1e-12);
        assert_eq!(model.weights, vec![1.0]);
    }

    #[test]
    fn k_distinct_points_gives_zero_loss() {
        let data = Dataset::from_rows(vec![vec![0.0], vec![5.0], vec![9.0]]).unwrap();
        let model = lloyd(&data, 3, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 1).unwrap();
        assert!(within_ss(&data, &model).unwrap() < 1e-24);
        let mut centers: Vec<f64> = model.centers.iter().map(|c| c[0]).collect();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.0, 5.0, 9.0]);
    }

    // Exhaustive-partition oracle on six 1-d points.
    #[test]
    fn two_cluster_solution_matches_brute_force() {
        let pts = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        let data = Dataset::from_rows(pts.iter().map(|&x| vec![x]).collect()).unwrap();

        let mut best_r = f64::INFINITY;
        let mut best_centers = (0.0, 0.0);
        for mask in 1u32..(1 << 6) - 1 {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0, 0.0, 0);
            for (i, &x) in pts.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    s0 += x;
                    n0 += 1;
                } else {
                    s1 += x;
                    n1 += 1;
                }
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let r: f64 = pts
                .iter()
                .map(|&x| ((x - m0) * (x - m0)).min((x - m1) * (x - m1)))
                .sum::<f64>()
                / 6.0;
            if r < best_r {
                best_r = r;
                best_centers = (m0.min(m1), m0.max(m1));
            }
        }
        assert_eq!(best_centers, (1.0, 11.0));

        let model = lloyd(&data, 2, 4, DEFAULT_MAX_ITER, DEFAULT_TOL, 3).unwrap();
        let mut centers: Vec<f64> = model.centers.iter().map(|c| c[0]).collect();
        centers.sort_by(f64::total_cmp);
        assert_relative_eq!(centers[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(centers[1], 11.0, epsilon = 1e-9);
        assert_relative_eq!(within_ss(&data, &model).unwrap(), best_r, epsilon = 1e-9);
    }

    #[test]
    fn lloyd_rejects_bad_k() {
        let data = random_data(5, 2, 0);
        assert!(lloyd(&data, 0, 1, 10, 1e-8, 0).is_err());
        assert!(lloyd(&data, 6, 1, 10, 1e-8, 0).is_err());
    }

    #[test]
    fn within_ss_matches_naive_recomputation() {
        let data = random_data(20, 3, 4);
        let model = lloyd(&data, 4, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 5).unwrap();
        let mut naive = 0.0;
        for p in data.iter() {
            let mut best = f64::INFINITY;
            for c in &model.centers {
                let mut d = 0.0;
                for i in 0..3 {
                    d += (p[i] - c[i]) * (p[i] - c[i]);
                }
                best = best.min(d);
            }
            naive += best;
        }
        naive /= 20.0;
        assert_relative_eq!(within_ss(&data, &model).unwrap(), naive, epsilon = 1e-12);
    }

    #[test]
    fn within_ss_zero_on_centers_and_dim_mismatch() {
        let data = Dataset::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let model = lloyd(&data, 2, 1, 50, 1e-10, 0).unwrap();
        assert!(within_ss(&data, &model).unwrap() < 1e-24);
        let other = Dataset::from_rows(vec![vec![0.0]]).unwrap();
        assert!(matches!(
            within_ss(&other, &model),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn restarts_return_the_best_run() {
        let data = random_data(60, 2, 7);
        let single = lloyd(&data, 5, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, 11).unwrap();
        let multi = lloyd(&data, 5, 8, DEFAULT_MAX_ITER, DEFAULT_TOL, 11).unwrap();
        let (r1, r8) = (
            within_ss(&data, &single).unwrap(),
            within_ss(&data, &multi).unwrap(),
        );
        assert!(r8 <= r1 + 1e-12);
    }

    #[test]
    fn permuting_rows_leaves_fitted_model_unchanged() {
        let data = random_data(40, 2, 13);
        let mut rows: Vec<Vec<f64>> = data.iter().map(|p| vec![p[0], p[1]]).collect();
        rows.reverse();
        rows.swap(3, 17);
        let permuted = Dataset::from_rows(rows).unwrap();

        let a = lloyd(&data, 3, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 21).unwrap();
        let b = lloyd(&permuted, 3, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 21).unwrap();
        assert_eq!(a, b);

        let ga = generalized_lloyd(&data, 3, 2, 60, DEFAULT_TOL, 21).unwrap();
        let gb = generalized_lloyd(&permuted, 3, 2, 60, DEFAULT_TOL, 21).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn gen_lloyd_k1_is_mean_and_mle_covariance() {
        let data = random_data(30, 2, 2);
        let model = generalized_lloyd(&data, 1, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, 0).unwrap();
        let mut mean = DVector::zeros(2);
        for p in data.iter() {
            mean += p;
        }
        mean /= 30.0;
        assert!((&model.means[0] - &mean).norm() < 1e-10);
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for p in data.iter() {
            let d = p - &mean;
            cov += &d * d.transpose();
        }
        cov /= 30.0;
        assert!((&model.covariances[0] - &cov).norm() < 1e-9);
        assert_eq!(model.weights, vec![1.0]);
    }

    #[test]
    fn isotropic_equal_weight_assignment_reduces_to_nearest_center() {
        let data = random_data(50, 2, 8);
        let km = lloyd(&data, 4, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 5).unwrap();
        let iso = GeneralModel {
            weights: vec![0.25; 4],
            means: km.centers.clone(),
            covariances: vec![DMatrix::identity(2, 2) * 0.7; 4],
        };
        let general = hard_assignments(&data, &iso).unwrap();
        for (p, &j) in data.iter().zip(&general) {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (jj, c) in km.centers.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best {
                    best = d;
                    best_j = jj;
                }
            }
            assert_eq!(j, best_j);
        }
    }

    #[test]
    fn ell_km_trivial_and_scaling() {
        let data = Dataset::from_rows(vec![vec![0.0]]).unwrap();
        let model = GeneralModel {
            weights: vec![1.0],
            means: vec![DVector::from_vec(vec![0.0])],
            covariances: vec![DMatrix::identity(1, 1)],
        };
        assert!(ell_km(&data, &model).unwrap().abs() < 1e-15);

        // Scaling Sigma by c: Mahalanobis term shrinks by 1/c, log det grows
        // by d log c, so with k=1 the whole objective transforms in closed
        // form.
        let data = random_data(25, 2, 3);
        let base = generalized_lloyd(&data, 1, 1, 50, 1e-10, 0).unwrap();
        let c = 3.7;
        let scaled = GeneralModel {
            weights: base.weights.clone(),
            means: base.means.clone(),
            covariances: vec![&base.covariances[0] * c],
        };
        let l0 = ell_km(&data, &base).unwrap();
        let l1 = ell_km(&data, &scaled).unwrap();
        // l0 = m/2 + (1/2)logdet with m the mean Mahalanobis term.
        let logdet = base.covariances[0].determinant().ln();
        let m = 2.0 * (l0 - 0.5 * logdet);
        let expected = 0.5 * m / c + 0.5 * logdet + 1.0 * c.ln();
        assert_relative_eq!(l1, expected, epsilon = 1e-9);
    }

    #[test]
    fn ell_km_matches_naive_recomputation() {
        let data = random_data(20, 2, 6);
        let model = generalized_lloyd(&data, 3, 2, 80, DEFAULT_TOL, 9).unwrap();
        let mut naive = 0.0;
        for p in data.iter() {
            let mut best = f64::INFINITY;
            for j in 0..3 {
                if model.weights[j] == 0.0 {
                    continue;
                }
                let inv = model.covariances[j].clone().try_inverse().unwrap();
                let diff = p - &model.means[j];
                let maha = (inv * &diff).dot(&diff);
                let s = 0.5 * maha + 0.5 * model.covariances[j].determinant().ln()
                    - model.weights[j].ln();
                best = best.min(s);
            }
            naive += best;
        }
        naive /= 20.0;
        assert_relative_eq!(ell_km(&data, &model).unwrap(), naive, epsilon = 1e-10);
    }

    #[test]
    fn ell_km_rejects_singular_covariance() {
        let data = Dataset::from_rows(vec![vec![0.0, 0.0]]).unwrap();
        let model = GeneralModel {
            weights: vec![1.0],
            means: vec![DVector::zeros(2)],
            covariances: vec![DMatrix::zeros(2, 2)],
        };
        assert!(matches!(
            ell_km(&data, &model),
            Err(Error::SingularCovariance { component: 0 })
        ));
    }

    #[test]
    fn weights_sum_to_one_and_counts_to_n() {
        let data = random_data(37, 2, 10);
        let model = lloyd(&data, 5, 2, DEFAULT_MAX_ITER, DEFAULT_TOL, 2).unwrap();
        assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(model.counts.iter().sum::<usize>(), 37);
    }

    #[test]
    fn model_docs_round_trip() {
        let data = random_data(20, 2, 1);
        let sm = lloyd(&data, 3, 1, 50, 1e-8, 0).unwrap();
        let json = serde_json::to_string(&sm.to_doc()).unwrap();
        let back = SphereModel::from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(sm, back);

        let gm = generalized_lloyd(&data, 2, 1, 50, 1e-8, 0).unwrap();
        let json = serde_json::to_string(&gm.to_doc()).unwrap();
        let back = GeneralModel::from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(gm, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Within-SS is non-increasing across Lloyd iterations.
        #[test]
        fn lloyd_trace_is_monotone(seed in 0u64..500) {
            let data = random_data(50, 2, seed);
            let (_, trace) = lloyd_traced(&data, 4, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, seed).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
            }
        }

        // l_kM is non-increasing across generalized Lloyd iterations.
        #[test]
        fn gen_lloyd_trace_is_monotone(seed in 0u64..500) {
            let data = random_data(50, 2, seed.wrapping_add(1000));
            let (_, trace) =
                generalized_lloyd_traced(&data, 3, 1, 100, DEFAULT_TOL, seed).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
            }
        }
    }
}
