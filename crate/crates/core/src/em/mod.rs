//! Importance-sampling EM for the full likelihood and for block composite
//! likelihoods.

pub mod composite;
pub mod design;
mod engine;
pub mod full;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlnError, Result};
use crate::gaussian::MixtureProposal;
use crate::importance::{estimate_moments, SiteMoments, WeightedSample};
use crate::linalg::{cholesky, pseudo_inverse, regularize_spd};
use crate::model::{Dataset, ParamLayout, SiteTarget};

pub use composite::{fit_composite, godambe_estimate, CompositeFitResult, Godambe};
pub use design::{build_block_design, BlockDesign};
pub use engine::ExactTrace;
pub use full::{e_step_site, fisher_estimate, fit_full, fit_full_exact, m_step_beta, m_step_sigma, FitResult};
pub use composite::{composite_e_step, fit_composite_exact, m_step_beta_composite, m_step_sigma_composite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleGrowth {
    /// `N^(h) = (h + 1) N^(0)`.
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_iter_max: usize,
    pub n_particles_initial: usize,
    pub particle_growth: ParticleGrowth,
    pub alpha: f64,
    pub stop_lag: usize,
    pub stop_tol: f64,
    pub master_seed: u64,
    /// Particles for the final pass at the estimate that feeds the variance
    /// and likelihood estimates; defaults to the last iteration's count.
    pub final_particles: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_iter_max: 300,
            n_particles_initial: 200,
            particle_growth: ParticleGrowth::Linear,
            alpha: 0.9,
            stop_lag: 50,
            stop_tol: 1e-3,
            master_seed: 1,
            final_particles: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter_max < 1 {
            return Err(PlnError::InvalidInput("n_iter_max must be at least 1".into()));
        }
        if self.n_particles_initial < 2 {
            return Err(PlnError::InvalidInput("at least 2 initial particles are required".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(PlnError::InvalidInput(format!("alpha = {} outside [0, 1)", self.alpha)));
        }
        if self.stop_lag < 1 {
            return Err(PlnError::InvalidInput("stop_lag must be at least 1".into()));
        }
        if !(self.stop_tol > 0.0) {
            return Err(PlnError::InvalidInput("stop_tol must be positive".into()));
        }
        if matches!(self.final_particles, Some(n) if n < 2) {
            return Err(PlnError::InvalidInput("final_particles must be at least 2".into()));
        }
        Ok(())
    }

    pub fn particles_at(&self, iteration: usize) -> usize {
        match self.particle_growth {
            ParticleGrowth::Linear => (iteration + 1).saturating_mul(self.n_particles_initial),
            ParticleGrowth::Constant => self.n_particles_initial,
        }
    }

    pub fn final_particle_count(&self, iterations_run: usize) -> usize {
        self.final_particles
            .unwrap_or_else(|| self.particles_at(iterations_run.saturating_sub(1)))
    }
}

/// ESS across all (site, block) samples of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub min: f64,
    pub median: f64,
    pub n_particles: usize,
    /// Samples flagged by the degenerate-sample policy (`ESS * N < 2` or no
    /// finite weight).
    pub degenerate: usize,
}

impl EssSummary {
    pub(crate) fn from_values(values: &[f64], n_particles: usize, degenerate: usize) -> Self {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let min = sorted.first().copied().unwrap_or(f64::NAN);
        Self { min, median: median_sorted(&sorted), n_particles, degenerate }
    }
}

pub(crate) fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Narrow-component moments of one (site, block) proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ProposalState {
    pub fn proposal(&self, alpha: f64, wide_cov: &DMatrix<f64>) -> Result<MixtureProposal> {
        MixtureProposal::from_moments(alpha, self.mean.clone(), &self.cov, wide_cov)
    }

    /// Refresh from importance-sampling moments, repairing a non-PD
    /// covariance with the jitter policy.
    pub fn from_moments(m: &SiteMoments) -> Self {
        Self { mean: m.mean.clone(), cov: regularize_spd(&m.cov).matrix }
    }

    /// Gaussian moments implied by the proposal itself, used when a sample
    /// has no finite weight and there is nothing better to reuse.
    pub fn implied_moments(&self) -> SiteMoments {
        let k = self.mean.len();
        let second = &self.cov + &self.mean * self.mean.transpose();
        let exp_mean = DVector::from_fn(k, |j, _| (self.mean[j] + 0.5 * self.cov[(j, j)]).exp());
        SiteMoments::from_raw(self.mean.clone(), second, exp_mean)
    }
}

/// Max over coordinates of `|a - b| / (1 + |b|)`.
pub fn relative_change(current: &DVector<f64>, lagged: &DVector<f64>) -> f64 {
    current
        .iter()
        .zip(lagged.iter())
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

/// Draw `n` particles from `proposal` and weight them against `target`.
pub(crate) fn weighted_draws<R: Rng + ?Sized>(
    target: &SiteTarget<'_>,
    proposal: &MixtureProposal,
    n: usize,
    rng: &mut R,
) -> Result<WeightedSample> {
    let k = target.dim();
    if proposal.dim() != k {
        return Err(PlnError::DimensionMismatch(format!("proposal dim {} vs target dim {k}", proposal.dim())));
    }
    let mut particles = vec![0.0; n * k];
    let mut log_t = vec![0.0; n];
    let mut log_q = vec![0.0; n];
    let (mut eps, mut c, mut s) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for r in 0..n {
        let row = &mut particles[r * k..(r + 1) * k];
        proposal.draw_into(rng, &mut eps, row);
        log_q[r] = proposal.log_density_with(row, &mut c, &mut s);
        log_t[r] = target.log_density(row, &mut s);
    }
    WeightedSample::new(particles, k, &log_t, &log_q)
}

/// Complete-data score of a block sub-model at one site, with the latent
/// statistics replaced by their conditional-moment estimates. Ordered by
/// `ParamLayout::new(d, k)` over the block's species.
pub fn block_score(
    data: &Dataset,
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    species: &[usize],
    site: usize,
    moments: &SiteMoments,
) -> DVector<f64> {
    let d = data.d();
    let k = species.len();
    let layout = ParamLayout::new(d, k);
    let mut score = DVector::zeros(layout.dim());
    for (jl, &j) in species.iter().enumerate() {
        let resid = data.y(site, j) - data.eta(b, site, j).exp() * moments.exp_mean[jl];
        for l in 0..d {
            score[layout.beta_index(l, jl)] = resid * data.covariates[(site, l)];
        }
    }
    let m = omega * &moments.second_moment * omega - omega;
    for a in 0..k {
        for c in 0..=a {
            let factor = if a == c { 0.5 } else { 1.0 };
            score[layout.sigma_index(a, c)] = factor * 0.5 * (m[(a, c)] + m[(c, a)]);
        }
    }
    score
}

/// `(1/n) sum_s w_s v_s v_s'` accumulated in the given order. The Fisher
/// and Godambe plug-ins all go through this routine so that equal inputs give
/// bitwise-equal matrices.
pub(crate) fn weighted_outer_mean<'a, I>(dim: usize, n: usize, items: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = (f64, &'a DVector<f64>)>,
{
    let mut acc = DMatrix::zeros(dim, dim);
    for (w, v) in items {
        for c in 0..dim {
            let vc = w * v[c];
            if vc == 0.0 {
                continue;
            }
            for r in 0..dim {
                acc[(r, c)] += v[r] * vc;
            }
        }
    }
    acc / n as f64
}

/// Maximize `sum_i y_i x_i'beta - exp(o_i + x_i'beta) e_i` by damped Newton.
/// `y` may already carry block weights.
pub(crate) fn newton_beta(
    species: usize,
    x: &DMatrix<f64>,
    offsets: &[f64],
    y: &[f64],
    e: &[f64],
    init: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if offsets.len() != n || y.len() != n || e.len() != n || init.len() != d {
        return Err(PlnError::DimensionMismatch("Newton inputs disagree in length".into()));
    }
    if e.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(PlnError::InvalidInput(format!("non-positive conditional exp-mean for species {species}")));
    }
    let tol = 1e-8 * (1.0 + y.iter().sum::<f64>());
    let lin = |beta: &DVector<f64>, i: usize| offsets[i] + (0..d).map(|l| x[(i, l)] * beta[l]).sum::<f64>();
    let objective = |beta: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let eta = lin(beta, i);
                y[i] * (eta - offsets[i]) - eta.exp() * e[i]
            })
            .sum()
    };
    let mut beta = init.clone();
    let mut f = objective(&beta);
    for _ in 0..200 {
        let mut grad = DVector::<f64>::zeros(d);
        let mut info = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let mu = lin(&beta, i).exp() * e[i];
            let r = y[i] - mu;
            for a in 0..d {
                grad[a] += r * x[(i, a)];
                for b in 0..=a {
                    info[(a, b)] += mu * x[(i, a)] * x[(i, b)];
                }
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(PlnError::NonConvergence { species, reason: "non-finite gradient".into() });
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = match cholesky(&info) {
            Some(c) => c.solve(&grad),
            None => pseudo_inverse(&info) * &grad,
        };
        // A small gradient alone is not enough: along a direction of
        // divergence the gradient vanishes while the Newton step stays O(1).
        if grad.amax() < tol && step.amax() < 1e-6 {
            return Ok(beta);
        }
        // Predicted gain below the resolution of f: the line search cannot
        // tell the step apart from rounding, so take it and stop.
        if grad.dot(&step) <= 1e-12 * (1.0 + f.abs()) && step.amax() < 1e-6 {
            return Ok(beta + step);
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let fc = objective(&cand);
            if fc >= f {
                beta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if beta.amax() > 30.0 {
            return Err(PlnError::NonConvergence {
                species,
                reason: "coefficients diverge (|beta| > 30); counts may be degenerate".into(),
            });
        }
        if !accepted {
            if grad.amax() < 1e2 * tol {
                return Ok(beta);
            }
            return Err(PlnError::NonConvergence { species, reason: "line search failed".into() });
        }
    }
    Err(PlnError::NonConvergence { species, reason: "Newton iteration limit reached".into() })
}

pub(crate) fn moments_or_previous(
    outcome: Result<WeightedSample>,
    previous: Option<&SiteMoments>,
    state: &ProposalState,
) -> Result<(SiteMoments, Option<WeightedSample>)> {
    match outcome {
        Ok(sample) => Ok((estimate_moments(&sample), Some(sample))),
        Err(PlnError::DegenerateSample) => {
            Ok((previous.cloned().unwrap_or_else(|| state.implied_moments()), None))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_growth() {
        let cfg = FitConfig { n_particles_initial: 10, ..FitConfig::default() };
        assert_eq!(cfg.particles_at(0), 10);
        assert_eq!(cfg.particles_at(4), 50);
        let cfg = FitConfig { particle_growth: ParticleGrowth::Constant, ..cfg };
        assert_eq!(cfg.particles_at(9), 10);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        assert!(FitConfig { alpha: 1.0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { n_particles_initial: 1, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { stop_tol: 0.0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { n_iter_max: 0, ..FitConfig::default() }.validate().is_err());
    }

    #[test]
    fn relative_change_is_scale_free() {
        let a = DVector::from_row_slice(&[1.0, 10.0]);
        let b = DVector::from_row_slice(&[1.5, 10.0]);
        assert_relative_eq!(relative_change(&b, &a), 0.25);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median_sorted(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median_sorted(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn newton_intercept_closed_form() {
        let n = 6;
        let x = DMatrix::from_element(n, 1, 1.0);
        let y = [0.0, 3.0, 1.0, 7.0, 2.0, 0.0];
        let e = [0.5, 1.2, 0.9, 2.0, 1.1, 0.7];
        let o = [0.0; 6];
        let beta = newton_beta(0, &x, &o, &y, &e, &DVector::zeros(1)).unwrap();
        let expected = (y.iter().sum::<f64>() / e.iter().sum::<f64>()).ln();
        assert_relative_eq!(beta[0], expected, epsilon = 1e-10);
    }

    #[test]
    fn newton_all_zero_counts_fails() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let r = newton_beta(2, &x, &[0.0; 4], &[0.0; 4], &[1.0; 4], &DVector::zeros(1));
        assert!(matches!(r, Err(PlnError::NonConvergence { species: 2, .. })));
    }
}
