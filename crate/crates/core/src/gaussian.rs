//! Multivariate normal densities and the two-component mixture proposal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PlnError, Result};
use crate::linalg::{cholesky, regularize_spd, spd_inverse, symmetrize, PackedCholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: PackedCholesky,
}

impl MvnParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(PlnError::DimensionMismatch(format!(
                "mean has length {}, covariance is {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        let chol = PackedCholesky::new(&cov).ok_or_else(|| PlnError::NotPositiveDefinite("covariance".into()))?;
        Ok(Self { mean, cov, chol })
    }

    /// Like [`MvnParams::new`], but repairs a non-PD covariance with the
    /// jitter policy of [`regularize_spd`]. Returns the jitter used.
    pub fn regularized(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<(Self, f64)> {
        let fixed = regularize_spd(cov);
        Ok((Self::new(mean, fixed.matrix)?, fixed.jitter))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.chol.log_det()
    }

    pub fn factor(&self) -> &PackedCholesky {
        &self.chol
    }

    /// Log density with caller-provided scratch space of length `dim`.
    #[inline]
    pub fn log_density_with(&self, x: &[f64], centered: &mut [f64], scratch: &mut [f64]) -> f64 {
        for (c, (xi, mi)) in centered.iter_mut().zip(x.iter().zip(self.mean.iter())) {
            *c = xi - mi;
        }
        let q = self.chol.mahalanobis_sq(centered, scratch);
        -0.5 * (self.dim() as f64 * LN_2PI + self.chol.log_det() + q)
    }

    #[inline]
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, eps: &mut [f64], out: &mut [f64]) {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        self.chol.affine(self.mean.as_slice(), eps, out);
    }
}

pub fn mvn_logpdf(p: &MvnParams, x: &DVector<f64>) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(PlnError::DimensionMismatch(format!("x has length {}, dim is {}", x.len(), p.dim())));
    }
    let k = p.dim();
    let (mut c, mut s) = (vec![0.0; k], vec![0.0; k]);
    Ok(p.log_density_with(x.as_slice(), &mut c, &mut s))
}

/// `alpha * N(m, S) + (1 - alpha) * N(m, Sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureProposal {
    alpha: f64,
    narrow: MvnParams,
    wide: MvnParams,
}

impl MixtureProposal {
    pub fn new(alpha: f64, narrow: MvnParams, wide: MvnParams) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(PlnError::InvalidInput(format!("mixture proportion {alpha} outside [0, 1)")));
        }
        if narrow.dim() != wide.dim() {
            return Err(PlnError::DimensionMismatch("mixture components differ in dimension".into()));
        }
        if narrow.mean() != wide.mean() {
            return Err(PlnError::InvalidInput("mixture components must share their mean".into()));
        }
        Ok(Self { alpha, narrow, wide })
    }

    /// Build from a shared mean, the narrow covariance (repaired if needed)
    /// and the wide covariance.
    pub fn from_moments(alpha: f64, mean: DVector<f64>, narrow_cov: &DMatrix<f64>, wide_cov: &DMatrix<f64>) -> Result<Self> {
        let (narrow, _) = MvnParams::regularized(mean.clone(), narrow_cov)?;
        let wide = MvnParams::new(mean, wide_cov.clone())?;
        Self::new(alpha, narrow, wide)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn narrow(&self) -> &MvnParams {
        &self.narrow
    }

    pub fn wide(&self) -> &MvnParams {
        &self.wide
    }

    pub fn dim(&self) -> usize {
        self.narrow.dim()
    }

    #[inline]
    pub fn log_density_with(&self, x: &[f64], centered: &mut [f64], scratch: &mut [f64]) -> f64 {
        let l2 = self.wide.log_density_with(x, centered, scratch);
        if self.alpha == 0.0 {
            return l2;
        }
        let l1 = self.narrow.log_density_with(x, centered, scratch);
        let a = self.alpha.ln() + l1;
        let b = (1.0 - self.alpha).ln() + l2;
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + ((a - m).exp() + (b - m).exp()).ln()
    }

    #[inline]
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, eps: &mut [f64], out: &mut [f64]) {
        let u: f64 = rng.random();
        if u < self.alpha {
            self.narrow.draw_into(rng, eps, out);
        } else {
            self.wide.draw_into(rng, eps, out);
        }
    }
}

pub fn mixture_logpdf(q: &MixtureProposal, x: &DVector<f64>) -> Result<f64> {
    if x.len() != q.dim() {
        return Err(PlnError::DimensionMismatch(format!("x has length {}, dim is {}", x.len(), q.dim())));
    }
    let k = q.dim();
    let (mut c, mut s) = (vec![0.0; k], vec![0.0; k]);
    Ok(q.log_density_with(x.as_slice(), &mut c, &mut s))
}

/// `n_draws x k` matrix of i.i.d. proposal draws.
pub fn sample_mixture<R: Rng + ?Sized>(q: &MixtureProposal, n_draws: usize, rng: &mut R) -> DMatrix<f64> {
    let k = q.dim();
    let mut out = DMatrix::zeros(n_draws, k);
    let (mut eps, mut row) = (vec![0.0; k], vec![0.0; k]);
    for r in 0..n_draws {
        q.draw_into(rng, &mut eps, &mut row);
        for j in 0..k {
            out[(r, j)] = row[j];
        }
    }
    out
}

fn precision_pair(sigma: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if sigma.shape() != s.shape() || sigma.nrows() != sigma.ncols() {
        return Err(PlnError::DimensionMismatch(format!("{:?} vs {:?}", sigma.shape(), s.shape())));
    }
    let a = spd_inverse(sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
    let b = spd_inverse(s).ok_or_else(|| PlnError::NotPositiveDefinite("S".into()))?;
    Ok((a, b))
}

/// True when `2 Sigma^{-1} - S^{-1}` is positive definite, which makes the
/// importance weights of the narrow Gaussian proposal square-integrable.
pub fn finite_variance_condition(sigma: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<bool> {
    let (omega, s_inv) = precision_pair(sigma, s)?;
    Ok(cholesky(&symmetrize(&(omega * 2.0 - s_inv))).is_some())
}

/// True when `Sigma^{-1} - S^{-1}` is positive definite (bounded weights).
pub fn bounded_weight_condition(sigma: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<bool> {
    let (omega, s_inv) = precision_pair(sigma, s)?;
    Ok(cholesky(&symmetrize(&(omega - s_inv))).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn mvn(mean: &[f64], cov: &[f64]) -> MvnParams {
        let k = mean.len();
        MvnParams::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(k, k, cov)).unwrap()
    }

    #[test]
    fn standard_values() {
        let p = mvn(&[0.0], &[1.0]);
        assert_relative_eq!(mvn_logpdf(&p, &DVector::zeros(1)).unwrap(), -0.918_938_533_204_672_8, epsilon = 1e-14);
        let p = mvn(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(
            mvn_logpdf(&p, &DVector::zeros(2)).unwrap(),
            -(2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
        assert!(mvn_logpdf(&p, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn mixture_degenerate_cases() {
        let a = mvn(&[1.0, -1.0], &[0.5, 0.1, 0.1, 0.4]);
        let b = mvn(&[1.0, -1.0], &[2.0, 0.0, 0.0, 3.0]);
        let x = DVector::from_row_slice(&[0.3, 0.7]);
        let q0 = MixtureProposal::new(0.0, a.clone(), b.clone()).unwrap();
        assert_eq!(mixture_logpdf(&q0, &x).unwrap(), mvn_logpdf(&b, &x).unwrap());
        let same = MixtureProposal::new(0.37, b.clone(), b.clone()).unwrap();
        assert_relative_eq!(mixture_logpdf(&same, &x).unwrap(), mvn_logpdf(&b, &x).unwrap(), epsilon = 1e-13);
        assert!(MixtureProposal::new(1.0, a.clone(), b.clone()).is_err());
        let shifted = mvn(&[0.0, 0.0], &[2.0, 0.0, 0.0, 3.0]);
        assert!(MixtureProposal::new(0.5, a, shifted).is_err());
    }

    #[test]
    fn condition_examples() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        assert!(finite_variance_condition(&sigma, &sigma).unwrap());
        assert!(!finite_variance_condition(&sigma, &(&sigma / 3.0)).unwrap());
        assert!(finite_variance_condition(&sigma, &(&sigma * 2.0)).unwrap());
        assert!(bounded_weight_condition(&sigma, &(&sigma * 2.0)).unwrap());
        assert!(!bounded_weight_condition(&sigma, &sigma).unwrap());
        assert!(!bounded_weight_condition(&sigma, &(&sigma / 2.0)).unwrap());
        assert!(finite_variance_condition(&sigma, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let q = MixtureProposal::new(0.9, mvn(&[0.0], &[0.2]), mvn(&[0.0], &[1.0])).unwrap();
        let a = sample_mixture(&q, 50, &mut stream(3, 0, 0, 0));
        let b = sample_mixture(&q, 50, &mut stream(3, 0, 0, 0));
        assert_eq!(a, b);
    }
}
