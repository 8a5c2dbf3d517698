//! Self-normalized importance sampling: weights, ESS and conditional moments.

pub mod quadrature;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{PlnError, Result};

pub use quadrature::{quadrature_log_marginal, quadrature_oracle};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    /// Particles stored row-major, `n_particles x k`.
    particles: Vec<f64>,
    k: usize,
    pub log_weights_raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    pub n_particles: usize,
}

impl WeightedSample {
    /// Weight particles given target and proposal log densities.
    pub fn new(particles: Vec<f64>, k: usize, log_target: &[f64], log_proposal: &[f64]) -> Result<Self> {
        let n = log_target.len();
        if particles.len() != n * k {
            return Err(PlnError::DimensionMismatch(format!(
                "{} particle coordinates for {n} particles of dimension {k}",
                particles.len()
            )));
        }
        let log_weights_raw: Vec<f64> = log_target.iter().zip(log_proposal).map(|(t, q)| t - q).collect();
        let (weights, ess) = normalize_log_weights(&log_weights_raw)?;
        Ok(Self { particles, k, log_weights_raw, weights, ess, n_particles: n })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn particle(&self, r: usize) -> &[f64] {
        &self.particles[r * self.k..(r + 1) * self.k]
    }

    pub fn particles(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_particles, self.k, &self.particles)
    }

    /// `log((1/N) sum_r exp(log rho_r))`, the importance-sampling estimate of
    /// the log normalizing constant of the target.
    pub fn log_evidence(&self) -> f64 {
        log_mean_exp(&self.log_weights_raw)
    }
}

pub fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (s / values.len() as f64).ln()
}

fn normalize_log_weights(raw: &[f64]) -> Result<(Vec<f64>, f64)> {
    if raw.is_empty() {
        return Err(PlnError::InvalidInput("empty importance sample".into()));
    }
    if raw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(PlnError::Numeric("importance log-ratio is NaN or +inf".into()));
    }
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(PlnError::DegenerateSample);
    }
    let mut w: Vec<f64> = raw.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut sq = 0.0;
    for x in w.iter_mut() {
        *x /= total;
        sq += *x * *x;
    }
    let ess = (1.0 / (raw.len() as f64 * sq)).min(1.0);
    Ok((w, ess))
}

/// Self-normalized weights and ESS from target and proposal log densities.
pub fn compute_weights(log_target: &[f64], log_proposal: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_target.len() != log_proposal.len() {
        return Err(PlnError::DimensionMismatch(format!(
            "{} target values vs {} proposal values",
            log_target.len(),
            log_proposal.len()
        )));
    }
    let raw: Vec<f64> = log_target.iter().zip(log_proposal).map(|(t, q)| t - q).collect();
    normalize_log_weights(&raw)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteMoments {
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    pub exp_mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl SiteMoments {
    pub fn from_raw(mean: DVector<f64>, second_moment: DMatrix<f64>, exp_mean: DVector<f64>) -> Self {
        let second_moment = (&second_moment + second_moment.transpose()) * 0.5;
        let cov = &second_moment - &mean * mean.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Self { mean, second_moment, exp_mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn estimate_moments(sample: &WeightedSample) -> SiteMoments {
    let k = sample.dim();
    let mut mean = DVector::zeros(k);
    let mut second = DMatrix::zeros(k, k);
    let mut exp_mean = DVector::zeros(k);
    for (r, &w) in sample.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = sample.particle(r);
        for a in 0..k {
            let wa = w * v[a];
            mean[a] += wa;
            exp_mean[a] += w * v[a].exp();
            for b in 0..=a {
                second[(a, b)] += wa * v[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            second[(b, a)] = second[(a, b)];
        }
    }
    SiteMoments::from_raw(mean, second, exp_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_densities_give_uniform_weights() {
        let t = [0.3, -1.0, 2.0, 5.0];
        let (w, ess) = compute_weights(&t, &t).unwrap();
        assert!(w.iter().all(|x| (*x - 0.25).abs() < 1e-15));
        assert_relative_eq!(ess, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_particle_weights() {
        let (w, _) = compute_weights(&[0.0, 3f64.ln()], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn half_ess() {
        let ninf = f64::NEG_INFINITY;
        let (_, ess) = compute_weights(&[0.0, 0.0, ninf, ninf], &[0.0; 4]).unwrap();
        assert_relative_eq!(ess, 0.5, epsilon = 1e-15);
        let (_, ess) = compute_weights(&[0.0, ninf, ninf, ninf], &[0.0; 4]).unwrap();
        assert_relative_eq!(ess, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_sample_is_an_error() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(compute_weights(&[ninf, ninf], &[0.0, 0.0]), Err(PlnError::DegenerateSample));
        assert!(compute_weights(&[0.0], &[0.0, 1.0]).is_err());
        assert!(compute_weights(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn single_particle_moments() {
        let s = WeightedSample::new(vec![0.5, -1.0], 2, &[0.0], &[0.0]).unwrap();
        let m = estimate_moments(&s);
        assert_eq!(m.mean.as_slice(), &[0.5, -1.0]);
        assert_eq!(m.second_moment[(0, 1)], -0.5);
        assert_eq!(m.exp_mean[1], (-1.0f64).exp());
        assert!(m.cov.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn uniform_weights_give_sample_moments() {
        let pts = vec![1.0, 2.0, 3.0, 4.0];
        let s = WeightedSample::new(pts, 1, &[0.0; 4], &[0.0; 4]).unwrap();
        let m = estimate_moments(&s);
        assert_relative_eq!(m.mean[0], 2.5, epsilon = 1e-15);
        assert_relative_eq!(m.second_moment[(0, 0)], 7.5, epsilon = 1e-14);
        assert_relative_eq!(m.cov[(0, 0)], 1.25, epsilon = 1e-14);
        assert_relative_eq!(s.log_evidence(), 0.0, epsilon = 1e-15);
    }
}
