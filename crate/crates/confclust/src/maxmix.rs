//! The max-mixture density `p(y; theta) = max_j pi_j phi(y; mu_j, Sigma_j) / Z`
//! whose upper level sets are exactly unions of ellipsoids.
//!
//! The normalizer `Z = integral of max_j pi_j phi_j` has no closed form;
//! it is estimated by importance sampling from the corresponding sum
//! mixture, for which every weight `max/sum` lies in `[1/k, 1]`, so the
//! estimator has uniformly bounded variance. That turns the negative
//! log-likelihood `l = l_kM + log Z` and its sandwich bounds into
//! machine-checkable quantities.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gauss::{logsumexp, GaussComps};
use crate::kmeans::{ell_km, GeneralModel};
use crate::rng::{stream, Domain};

/// Importance-sampling estimate of the max-mixture normalizer.
#[derive(Debug, Clone)]
pub struct ZEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// The unnormalized density `max_j pi_j phi(y; mu_j, Sigma_j)`, computed in
/// the log domain.
pub fn maxmix_unnorm(model: &GeneralModel, y: &DVector<f64>) -> Result<f64> {
    if y.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: y.len(),
        });
    }
    let comps = GaussComps::from_model(model)?;
    Ok(log_max_pi_phi(&comps, y).exp())
}

fn log_max_pi_phi(comps: &GaussComps, y: &DVector<f64>) -> f64 {
    (0..comps.k())
        .map(|j| comps.log_pi_phi(j, y))
        .fold(f64::NEG_INFINITY, f64::max)
}

const Z_CHUNK: usize = 1 << 13;

/// Estimate `Z = integral of max_j pi_j phi_j` by importance sampling with
/// the sum mixture as proposal. Deterministic in `seed`.
pub fn estimate_z(model: &GeneralModel, n_samples: usize, seed: u64) -> Result<ZEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    let comps = GaussComps::from_model(model)?;
    let k = comps.k();
    let chunks = n_samples.div_ceil(Z_CHUNK);
    let (sum, sum_sq) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, Domain::ZEstimate, c as u64);
            let count = Z_CHUNK.min(n_samples - c * Z_CHUNK);
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            let mut row = vec![0.0f64; k];
            for _ in 0..count {
                let y = comps.sample_mixture(&mut rng);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = comps.log_pi_phi(j, &y);
                }
                let log_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w = (log_max - logsumexp(&row)).exp();
                debug_assert!(w >= 1.0 / k as f64 - 1e-12 && w <= 1.0 + 1e-12);
                s += w;
                s2 += w * w;
            }
            (s, s2)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(ZEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        n_samples,
        seed,
    })
}

/// The max-mixture density with its estimated normalizer.
#[derive(Debug, Clone)]
pub struct MaxMixDensity {
    pub model: GeneralModel,
    pub z: ZEstimate,
}

impl MaxMixDensity {
    pub fn fit(model: GeneralModel, n_samples: usize, seed: u64) -> Result<Self> {
        let z = estimate_z(&model, n_samples, seed)?;
        Ok(MaxMixDensity { model, z })
    }

    /// `p(y; theta) = max_j pi_j phi_j(y) / Z`.
    pub fn density(&self, y: &DVector<f64>) -> Result<f64> {
        Ok(maxmix_unnorm(&self.model, y)? / self.z.value)
    }
}

/// Monte Carlo evaluation of the max-mixture negative log-likelihood
/// `l = l_kM + log Z`.
#[derive(Debug, Clone)]
pub struct EllEstimate {
    pub value: f64,
    pub ell_km: f64,
    pub log_z: f64,
    /// Delta-method standard error of `log Z`.
    pub log_z_std_error: f64,
}

/// Evaluate `l(theta)` on a dataset; exact in its first term, Monte Carlo in
/// `log Z`.
pub fn ell(data: &Dataset, model: &GeneralModel, z_samples: usize, seed: u64) -> Result<EllEstimate> {
    let km = ell_km(data, model)?;
    let z = estimate_z(model, z_samples, seed)?;
    Ok(EllEstimate {
        value: km + z.value.ln(),
        ell_km: km,
        log_z: z.value.ln(),
        log_z_std_error: z.std_error / z.value,
    })
}
