//! Gaussian mixtures by expectation-maximization.
//!
//! The objective is the paper-form negative average log-likelihood
//!
//! ```text
//! l_GM(theta) = -(1/n) sum_i log sum_j exp{ -(1/2) M_ij - (1/2) log det Sigma_j + log pi_j }
//! ```
//!
//! which drops the dimension constant `(d/2) log 2pi`; the optimizer is the
//! same and the value slots directly into the `l_GM <= l_kM <= l_GM + log k`
//! sandwich. All responsibilities are computed in the log domain with a max
//! shift.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gauss::{logsumexp, GaussComps};
use crate::kmeans::{
    global_covariance, lloyd, mle_covariance, ridge_covariance, GeneralModel,
};
use crate::rng::{mix, Domain};

/// Maximum likelihood Gaussian mixture fit; best of `restarts` EM runs, each
/// initialized from an ordinary k-means solution.
pub fn em_fit(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<GeneralModel> {
    em_fit_traced(data, k, restarts, max_iter, tol, seed).map(|(m, _)| m)
}

/// [`em_fit`] returning also the `l_GM` trace of the winning run, one entry
/// per EM iteration, non-increasing.
pub fn em_fit_traced(
    data: &Dataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(GeneralModel, Vec<f64>)> {
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
    let (global_cov, global_scale) = global_covariance(data.points());

    let runs: Vec<(usize, Result<(GeneralModel, Vec<f64>)>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init_seed = mix(seed, Domain::EmInit, r as u64);
            (
                r,
                init_from_lloyd(data, k, init_seed, &global_cov, global_scale).and_then(|m| {
                    run_em(data, m, max_iter, tol, global_scale)
                }),
            )
        })
        .collect();

    let mut best: Option<(f64, usize, (GeneralModel, Vec<f64>))> = None;
    let mut first_err: Option<Error> = None;
    for (r, run) in runs {
        match run {
            Ok(out) => {
                let obj = out.1.last().copied().unwrap_or(f64::INFINITY);
                let obj = if obj.is_nan() { f64::INFINITY } else { obj };
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

/// Centers become means, per-cluster scatter becomes the covariance, cluster
/// shares become the weights.
fn init_from_lloyd(
    data: &Dataset,
    k: usize,
    seed: u64,
    global_cov: &DMatrix<f64>,
    global_scale: f64,
) -> Result<GeneralModel> {
    let km = lloyd(data, k, 1, crate::kmeans::DEFAULT_MAX_ITER, crate::kmeans::DEFAULT_TOL, seed)?;
    let mut assignment = vec![0usize; data.n()];
    for (i, p) in data.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, c) in km.centers.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best {
                best = d;
                assignment[i] = j;
            }
        }
    }
    let n = data.n() as f64;
    let mut weights = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        let count = assignment.iter().filter(|&&a| a == j).count();
        if count == 0 {
            weights.push(0.5 / n);
            covariances.push(ridge_covariance(global_cov.clone(), global_scale));
        } else {
            weights.push(count as f64 / n);
            let cov = mle_covariance(data.points(), |i| assignment[i] == j, &km.centers[j], count);
            covariances.push(ridge_covariance(cov, global_scale));
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GeneralModel {
        weights,
        means: km.centers,
        covariances,
    })
}

fn run_em(
    data: &Dataset,
    mut model: GeneralModel,
    max_iter: usize,
    tol: f64,
    global_scale: f64,
) -> Result<(GeneralModel, Vec<f64>)> {
    let n = data.n();
    let dim = data.dim();
    let k = model.k();
    let mut trace: Vec<f64> = Vec::new();
    let mut iter = 0usize;
    let mut log_row = vec![0.0f64; k];
    loop {
        let comps = GaussComps::from_model(&model)?;
        // E step in the log domain; the row logsumexp is -l_GM's summand.
        let mut resp = vec![vec![0.0f64; k]; n];
        let mut obj = 0.0f64;
        for (i, p) in data.iter().enumerate() {
            for (j, lr) in log_row.iter_mut().enumerate() {
                *lr = comps.log_score(j, p);
            }
            let lse = logsumexp(&log_row);
            obj -= lse;
            for j in 0..k {
                resp[i][j] = (log_row[j] - lse).exp();
            }
        }
        obj /= n as f64;
        let converged = matches!(trace.last(), Some(&prev) if {
            let dec = prev - obj;
            dec >= 0.0 && dec <= tol * prev.abs().max(1e-12)
        });
        trace.push(obj);
        if converged || iter >= max_iter {
            return Ok((model, trace));
        }
        // M step.
        for j in 0..k {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            if nj < 1e-12 {
                model.weights[j] = 0.0;
                continue;
            }
            let mut mean = DVector::<f64>::zeros(dim);
            for (i, p) in data.iter().enumerate() {
                mean.axpy(resp[i][j], p, 1.0);
            }
            mean /= nj;
            let mut cov = DMatrix::<f64>::zeros(dim, dim);
            for (i, p) in data.iter().enumerate() {
                let diff = p - &mean;
                cov.syger(resp[i][j], &diff, &diff, 1.0);
            }
            cov /= nj;
            for r in 0..dim {
                for c in (r + 1)..dim {
                    cov[(r, c)] = cov[(c, r)];
                }
            }
            model.means[j] = mean;
            model.covariances[j] = ridge_covariance(cov, global_scale);
            model.weights[j] = nj / n as f64;
        }
        iter += 1;
    }
}

/// Exact value of `l_GM` for a fitted model, via max-shifted log-sum-exp.
pub fn ell_gm(data: &Dataset, model: &GeneralModel) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let comps = GaussComps::from_model(model)?;
    let k = model.k();
    let mut row = vec![0.0f64; k];
    let mut total = 0.0f64;
    for p in data.iter() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = comps.log_score(j, p);
        }
        total -= logsumexp(&row);
    }
    Ok(total / data.n() as f64)
}

/// E-step responsibilities, one row per point, each row summing to 1.
pub fn responsibilities(data: &Dataset, model: &GeneralModel) -> Result<Vec<Vec<f64>>> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let comps = GaussComps::from_model(model)?;
    let k = model.k();
    Ok(data
        .iter()
        .map(|p| {
            let row: Vec<f64> = (0..k).map(|j| comps.log_score(j, p)).collect();
            let lse = logsumexp(&row);
            row.iter().map(|lr| (lr - lse).exp()).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_blobs;
    use crate::geometry::Rect;
    use crate::kmeans::ell_km;
    use crate::rng::{stream, Domain};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, Domain::Trial, 7);
        Dataset::from_rows(
            (0..n)
                .map(|_| vec![rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0])
                .collect(),
        )
        .unwrap()
    }

    fn random_model(k: usize, seed: u64) -> GeneralModel {
        let mut rng = stream(seed, Domain::Trial, 8);
        let means = (0..k)
            .map(|_| DVector::from_vec(vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0]))
            .collect();
        let covariances = (0..k)
            .map(|_| {
                let a = 0.3 + rng.random::<f64>();
                let b = 0.3 + rng.random::<f64>();
                let c = 0.5 * (a.min(b)) * (2.0 * rng.random::<f64>() - 1.0);
                DMatrix::from_row_slice(2, 2, &[a, c, c, b])
            })
            .collect();
        let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GeneralModel {
            weights,
            means,
            covariances,
        }
    }

    #[test]
    fn k1_is_exact_mle() {
        let data = random_data(40, 3);
        let model = em_fit(&data, 1, 1, 100, 1e-10, 0).unwrap();
        let mut mean = DVector::zeros(2);
        for p in data.iter() {
            mean += p;
        }
        mean /= 40.0;
        assert!((&model.means[0] - &mean).norm() < 1e-9);
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for p in data.iter() {
            let d = p - &mean;
            cov += &d * d.transpose();
        }
        cov /= 40.0;
        assert!((&model.covariances[0] - &cov).norm() < 1e-8);
    }

    // Known-generator check: two far-separated tight blobs.
    #[test]
    fn two_blobs_recovered() {
        let centers = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![20.0, 0.0]),
        ];
        let noise_box = Rect::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let data = gen_blobs(&centers, 150, 0.5, 0, &noise_box, 4).unwrap();
        let model = em_fit(&data, 2, 2, 200, 1e-10, 1).unwrap();

        let se = 0.5 / (150f64).sqrt();
        let mut fitted: Vec<&DVector<f64>> = model.means.iter().collect();
        fitted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((fitted[0] - &centers[0]).norm() < 3.0 * se * 2.0);
        assert!((fitted[1] - &centers[1]).norm() < 3.0 * se * 2.0);

        // Responsibilities are essentially 0/1 for points this separated.
        let resp = responsibilities(&data, &model).unwrap();
        for row in resp {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            assert!(m > 0.999);
        }
    }

    #[test]
    fn em_rejects_k_larger_than_n() {
        let data = random_data(5, 0);
        assert!(em_fit(&data, 6, 1, 10, 1e-8, 0).is_err());
    }

    #[test]
    fn ell_gm_k1_equals_ell_km() {
        let data = random_data(25, 6);
        let model = random_model(1, 6);
        let gm = ell_gm(&data, &model).unwrap();
        let km = ell_km(&data, &model).unwrap();
        assert_relative_eq!(gm, km, epsilon = 1e-12);
    }

    #[test]
    fn ell_gm_matches_naive_recomputation() {
        let data = random_data(20, 9);
        let model = random_model(3, 9);
        let naive_total: f64 = data
            .iter()
            .map(|p| {
                let mut s = 0.0;
                for j in 0..3 {
                    let inv = model.covariances[j].clone().try_inverse().unwrap();
                    let diff = p - &model.means[j];
                    let maha = (inv * &diff).dot(&diff);
                    s += (-0.5 * maha - 0.5 * model.covariances[j].determinant().ln()
                        + model.weights[j].ln())
                    .exp();
                }
                -s.ln()
            })
            .sum();
        let naive = naive_total / 20.0;
        assert_relative_eq!(ell_gm(&data, &model).unwrap(), naive, epsilon = 1e-10);
    }

    #[test]
    fn ell_gm_rejects_singular_covariance() {
        let data = random_data(5, 2);
        let model = GeneralModel {
            weights: vec![1.0],
            means: vec![DVector::zeros(2)],
            covariances: vec![DMatrix::zeros(2, 2)],
        };
        assert!(matches!(
            ell_gm(&data, &model),
            Err(Error::SingularCovariance { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // The Proposition 2 sandwich, exactly as stated:
        // l_GM <= l_kM <= l_GM + log k.
        #[test]
        fn gm_km_sandwich(seed in 0u64..1000, k in 1usize..5) {
            let data = random_data(30, seed);
            let model = random_model(k, seed.wrapping_add(77));
            let gm = ell_gm(&data, &model).unwrap();
            let km = ell_km(&data, &model).unwrap();
            prop_assert!(gm <= km + 1e-10);
            prop_assert!(km <= gm + (k as f64).ln() + 1e-10);
        }

        // Responsibilities are row-stochastic within 1e-12.
        #[test]
        fn responsibilities_are_row_stochastic(seed in 0u64..1000) {
            let data = random_data(15, seed);
            let model = random_model(3, seed.wrapping_add(13));
            let resp = responsibilities(&data, &model).unwrap();
            for row in resp {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        // l_GM is non-increasing across EM iterations.
        #[test]
        fn em_trace_is_monotone(seed in 0u64..400) {
            let data = random_data(50, seed.wrapping_add(5000));
            let (_, trace) = em_fit_traced(&data, 3, 1, 60, 1e-9, seed).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
            }
        }
    }
}
