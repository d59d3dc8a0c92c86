//! Choosing tuning parameters by minimum estimated volume and by the
//! bootstrap hypothesis test.
//!
//! The volume curve shares one data split and one Monte Carlo proposal
//! stream across all k (common random numbers), so curve differences
//! reflect the models rather than sampling noise. The test scans k = K,
//! K-1, ..., 1 and selects the first k whose basic-bootstrap confidence
//! intervals for `theta_{t,k} = nu_t - nu_k` lie strictly above zero for
//! every t < k; if nothing rejects, k = 1 is returned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{k_ellipsoids, k_spheres, PredictionSet, ResidualKind};
use crate::dataset::{split_half, Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::geometry::{estimate_volume_in, Extent, Rect};
use crate::gmm::em_fit;
use crate::kmeans::{generalized_lloyd, lloyd, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::levelset::{level_set_spheres, LevelSpec};
use crate::rng::{mix, stream, Domain};

/// Restarts used by the pipeline fitters.
const PIPELINE_RESTARTS: usize = 4;

/// A full residual pipeline: which model is fit on the fitting half and
/// which residual family calibrates the set. For `LevelSet` the swept
/// parameter `k` is the number of neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KSpheres,
    KSpheresWeighted,
    Gmm,
    MaxmixKLloyd,
    MaxmixEm,
    LevelSet { level_quantile: f64, adaptive: bool },
}

impl Method {
    /// Fit the model on the fitting half and calibrate the prediction set on
    /// the calibration half.
    pub fn fit_set(
        &self,
        split: &SplitPair,
        k: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<PredictionSet> {
        let fit = &split.fit_half;
        let calib = &split.calib_half;
        match self {
            Method::KSpheres => {
                let model = lloyd(fit, k, PIPELINE_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL, seed)?;
                k_spheres(&model, calib, alpha, false)
            }
            Method::KSpheresWeighted => {
                let model = lloyd(fit, k, PIPELINE_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL, seed)?;
                k_spheres(&model, calib, alpha, true)
            }
            Method::Gmm => {
                let model = em_fit(fit, k, PIPELINE_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL, seed)?;
                k_ellipsoids(&model, calib, alpha, ResidualKind::GmmLogForm)
            }
            Method::MaxmixKLloyd => {
                let model =
                    generalized_lloyd(fit, k, PIPELINE_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL, seed)?;
                k_ellipsoids(&model, calib, alpha, ResidualKind::MaxmixScore)
            }
            Method::MaxmixEm => {
                let model = em_fit(fit, k, PIPELINE_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL, seed)?;
                k_ellipsoids(&model, calib, alpha, ResidualKind::MaxmixScore)
            }
            Method::LevelSet {
                level_quantile,
                adaptive,
            } => level_set_spheres(split, k, LevelSpec::Quantile(*level_quantile), alpha, *adaptive),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::KSpheres => write!(f, "kspheres"),
            Method::KSpheresWeighted => write!(f, "kspheres-weighted"),
            Method::Gmm => write!(f, "gmm"),
            Method::MaxmixKLloyd => write!(f, "maxmix-klloyd"),
            Method::MaxmixEm => write!(f, "maxmix-em"),
            Method::LevelSet { .. } => write!(f, "levelset"),
        }
    }
}

/// Estimated set volume for each candidate k, with the bootstrap replicate
/// curves when [`bootstrap_test_k`] produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeCurve {
    pub ks: Vec<usize>,
    pub volumes: Vec<f64>,
    pub std_errors: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_curves: Option<Vec<Vec<f64>>>,
}

/// Fit every k on one shared split and estimate every volume over one shared
/// proposal box and sample stream.
pub fn volume_curve(
    data: &Dataset,
    ks: &[usize],
    alpha: f64,
    method: &Method,
    mc_samples: usize,
    seed: u64,
) -> Result<VolumeCurve> {
    if ks.is_empty() {
        return Err(Error::Empty("no candidate ks"));
    }
    let split = split_half(data, mix(seed, Domain::Pipeline, 0))?;
    let sets: Vec<PredictionSet> = ks
        .par_iter()
        .enumerate()
        .map(|(i, &k)| method.fit_set(&split, k, alpha, mix(seed, Domain::Pipeline, 1000 + i as u64)))
        .collect::<Result<_>>()?;

    let mut shared: Option<Rect> = None;
    for set in &sets {
        match set.geometry.extent() {
            Extent::Unbounded => return Err(Error::UnboundedSet),
            Extent::Empty => {}
            Extent::Bounded(rect) => {
                shared = Some(match shared {
                    None => rect,
                    Some(prev) => prev.hull(&rect),
                });
            }
        }
    }
    let mc_seed = mix(seed, Domain::Pipeline, 2);
    let mut volumes = Vec::with_capacity(ks.len());
    let mut std_errors = Vec::with_capacity(ks.len());
    match shared.map(|r| r.inflated(0.01)) {
        None => {
            volumes.resize(ks.len(), 0.0);
            std_errors.resize(ks.len(), 0.0);
        }
        Some(rect) => {
            for set in &sets {
                let est = estimate_volume_in(set, &rect, mc_samples, mc_seed)?;
                volumes.push(est.value);
                std_errors.push(est.std_error);
            }
        }
    }
    Ok(VolumeCurve {
        ks: ks.to_vec(),
        volumes,
        std_errors,
        bootstrap_curves: None,
    })
}

/// The smallest k attaining the minimum estimated volume.
pub fn select_k_min_volume(curve: &VolumeCurve) -> usize {
    assert!(!curve.ks.is_empty(), "volume curve is empty");
    let mut best_k = curve.ks[0];
    let mut best_v = curve.volumes[0];
    for (&k, &v) in curve.ks.iter().zip(&curve.volumes).skip(1) {
        if v < best_v || (v == best_v && k < best_k) {
            best_v = v;
            best_k = k;
        }
    }
    best_k
}

/// One confidence interval for `theta_{t,k} = nu_t - nu_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interval {
    pub t: usize,
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub k: usize,
    pub rejected: bool,
}

/// Outcome of the bootstrap hypothesis test for k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestDecision {
    pub k_hat: usize,
    pub intervals: Vec<Interval>,
    pub rejected: Vec<Rejection>,
}

/// The bootstrap test over an arbitrary curve statistic.
///
/// `curve_fn(data, seed)` must return one value per entry of `ks`. All
/// replicates resample `n` rows of `data` with replacement and reuse one
/// pipeline seed, so replicate-to-replicate variation reflects the data
/// resampling alone. Intervals are basic bootstrap intervals
/// `(S_t - S_k) +/- q / sqrt(n)` where `q` is the bootstrap
/// `1 - alpha/(k-1)` quantile of `sqrt(n) |S_t* - S_k* - (S_t - S_k)|`
/// (Bonferroni over the k-1 comparisons).
pub fn bootstrap_test_with<F>(
    data: &Dataset,
    ks: &[usize],
    alpha: f64,
    b: usize,
    seed: u64,
    curve_fn: F,
) -> Result<(TestDecision, Vec<Vec<f64>>)>
where
    F: Fn(&Dataset, u64) -> Result<Vec<f64>> + Sync,
{
    if b < 100 {
        return Err(Error::invalid(
            "b",
            format!("need at least 100 bootstrap replicates, got {b}"),
        ));
    }
    let kmax = ks.len();
    if ks.iter().enumerate().any(|(i, &k)| k != i + 1) {
        return Err(Error::invalid(
            "ks",
            "bootstrap test needs a contiguous range 1..=K",
        ));
    }
    let pipeline_seed = mix(seed, Domain::Pipeline, 0);
    let base = curve_fn(data, pipeline_seed)?;
    if base.len() != kmax {
        return Err(Error::invalid(
            "curve_fn",
            format!("returned {} values for {} ks", base.len(), kmax),
        ));
    }
    let replicates: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, Domain::Bootstrap, j as u64);
            let resampled = data.resample(&mut rng);
            let curve = curve_fn(&resampled, pipeline_seed)?;
            if curve.len() != kmax {
                return Err(Error::invalid("curve_fn", "replicate length mismatch"));
            }
            Ok(curve)
        })
        .collect::<Result<_>>()?;

    let sqrt_n = (data.n() as f64).sqrt();
    let mut intervals = Vec::new();
    let mut rejected = Vec::with_capacity(kmax);
    let mut k_hat = 1usize;
    let mut decided = false;
    for k in (1..=kmax).rev() {
        if k == 1 {
            rejected.push(Rejection { k, rejected: false });
            continue;
        }
        let level = 1.0 - alpha / (k - 1) as f64;
        let mut all_positive = true;
        for t in 1..k {
            let delta = base[t - 1] - base[k - 1];
            let mut devs: Vec<f64> = replicates
                .iter()
                .map(|rep| (sqrt_n * (rep[t - 1] - rep[k - 1] - delta)).abs())
                .collect();
            devs.sort_by(f64::total_cmp);
            let idx = ((level * b as f64).ceil() as usize).clamp(1, b);
            let q = devs[idx - 1];
            let (lower, upper) = (delta - q / sqrt_n, delta + q / sqrt_n);
            intervals.push(Interval { t, k, lower, upper });
            if !(lower > 0.0) {
                all_positive = false;
            }
        }
        rejected.push(Rejection {
            k,
            rejected: all_positive,
        });
        if all_positive && !decided {
            k_hat = k;
            decided = true;
        }
    }
    rejected.reverse();
    Ok((
        TestDecision {
            k_hat,
            intervals,
            rejected,
        },
        replicates,
    ))
}

/// The bootstrap test over the conformal volume pipeline. Returns the
/// decision together with the base volume curve carrying the replicate
/// curves.
pub fn bootstrap_test_k(
    data: &Dataset,
    ks: &[usize],
    alpha: f64,
    b: usize,
    seed: u64,
    method: &Method,
    mc_samples: usize,
) -> Result<(TestDecision, VolumeCurve)> {
    let pipeline_seed = mix(seed, Domain::Pipeline, 0);
    let mut curve = volume_curve(data, ks, alpha, method, mc_samples, pipeline_seed)?;
    let (decision, replicates) = bootstrap_test_with(data, ks, alpha, b, seed, |d, s| {
        volume_curve(d, ks, alpha, method, mc_samples, s).map(|c| c.volumes)
    })?;
    curve.bootstrap_curves = Some(replicates);
    Ok((decision, curve))
}

/// The union-bound correction of Remark 2: search over `1..=K_n` at level
/// `alpha / K_n` to keep the post-selection guarantee.
pub fn corrected_alpha(alpha: f64, k_n: usize) -> Result<f64> {
    if k_n == 0 {
        return Err(Error::invalid("k_n", "must be at least 1"));
    }
    Ok(alpha / k_n as f64)
}
