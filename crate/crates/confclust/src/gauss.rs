//! Shared per-component Gaussian machinery: Cholesky factors, Mahalanobis
//! distances and the log scores every residual kind is built from.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kmeans::GeneralModel;

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

/// One mixture component with its covariance factorization.
pub(crate) struct GaussComp {
    pub weight: f64,
    pub mu: DVector<f64>,
    /// Lower Cholesky factor of the covariance.
    pub chol_l: DMatrix<f64>,
    /// log det(Sigma).
    pub log_det: f64,
    /// ln(weight); -inf for weight 0.
    pub log_pi: f64,
}

pub(crate) struct GaussComps {
    pub comps: Vec<GaussComp>,
    pub dim: usize,
}

impl GaussComps {
    pub fn from_model(model: &GeneralModel) -> Result<Self> {
        let dim = model.dim();
        let mut comps = Vec::with_capacity(model.k());
        for j in 0..model.k() {
            let chol = model.covariances[j]
                .clone()
                .cholesky()
                .ok_or(Error::SingularCovariance { component: j })?;
            let chol_l = chol.unpack();
            let log_det = 2.0 * (0..dim).map(|i| chol_l[(i, i)].ln()).sum::<f64>();
            if !log_det.is_finite() {
                return Err(Error::SingularCovariance { component: j });
            }
            comps.push(GaussComp {
                weight: model.weights[j],
                mu: model.means[j].clone(),
                chol_l,
                log_det,
                log_pi: model.weights[j].ln(),
            });
        }
        Ok(GaussComps { comps, dim })
    }

    pub fn k(&self) -> usize {
        self.comps.len()
    }

    /// Squared Mahalanobis distance (y - mu)^T Sigma^{-1} (y - mu).
    pub fn mahalanobis(&self, j: usize, y: &DVector<f64>) -> f64 {
        let c = &self.comps[j];
        let z = c
            .chol_l
            .solve_lower_triangular(&(y - &c.mu))
            .expect("cholesky factor has positive diagonal");
        z.norm_squared()
    }

    /// ln pi_j - (1/2) M_j(y) - (1/2) log det Sigma_j.
    pub fn log_score(&self, j: usize, y: &DVector<f64>) -> f64 {
        let c = &self.comps[j];
        c.log_pi - 0.5 * self.mahalanobis(j, y) - 0.5 * c.log_det
    }

    /// (1/2) M_j(y) + (1/2) log det Sigma_j - ln pi_j.
    pub fn half_score(&self, j: usize, y: &DVector<f64>) -> f64 {
        -self.log_score(j, y)
    }

    /// min_j half_score, the hard-assignment objective per point.
    pub fn min_half_score(&self, y: &DVector<f64>) -> f64 {
        (0..self.k())
            .map(|j| self.half_score(j, y))
            .fold(f64::INFINITY, f64::min)
    }

    /// ln(pi_j phi(y; mu_j, Sigma_j)) with the full Gaussian normalizer.
    pub fn log_pi_phi(&self, j: usize, y: &DVector<f64>) -> f64 {
        self.log_score(j, y) - 0.5 * self.dim as f64 * LN_2PI
    }

    /// Draw from the sum mixture sum_j pi_j N(mu_j, Sigma_j).
    pub fn sample_mixture(&self, rng: &mut impl Rng) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.k() - 1;
        for (j, c) in self.comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let c = &self.comps[pick];
        let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        &c.mu + &c.chol_l * z
    }
}

/// Numerically stable log(sum(exp(v))) with max shift.
pub(crate) fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_handles_extremes() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = logsumexp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_identity_covariance_is_squared_distance() {
        let model = GeneralModel {
            weights: vec![1.0],
            means: vec![DVector::from_vec(vec![1.0, 2.0])],
            covariances: vec![DMatrix::identity(2, 2)],
        };
        let comps = GaussComps::from_model(&model).unwrap();
        let y = DVector::from_vec(vec![4.0, 6.0]);
        assert!((comps.mahalanobis(0, &y) - 25.0).abs() < 1e-12);
        assert!(comps.comps[0].log_det.abs() < 1e-12);
    }
}
