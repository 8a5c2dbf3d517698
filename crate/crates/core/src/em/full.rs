//! Full-likelihood importance-sampling EM and the Fisher-information plug-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use super::design::BlockDesign;
use super::engine::{self, ExactTrace, SigmaUpdate};
use super::{block_score, newton_beta, weighted_draws, weighted_outer_mean, EssSummary, FitConfig, ProposalState};
use crate::error::{PlnError, Result};
use crate::gaussian::MixtureProposal;
use crate::importance::{estimate_moments, SiteMoments, WeightedSample};
use crate::init::InitState;
use crate::linalg::{inverse_or_pinv, regularize_spd, spd_inverse, PackedCholesky};
use crate::model::{Dataset, ModelParams, ParamLayout, SiteTarget};

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub layout: ParamLayout,
    /// Asymptotic variance of `sqrt(n) (theta_hat - theta)`: the inverse
    /// per-site information. Entries for coordinates the fit cannot identify
    /// are NaN.
    pub variance: DMatrix<f64>,
    /// `sqrt(diag(variance) / n)`.
    pub std_errors: DVector<f64>,
    /// Per-site information matrix (Fisher, or Godambe for composite fits).
    pub information: DMatrix<f64>,
    /// Set when a (near-)singular matrix was inverted by pseudo-inverse.
    pub pseudo_inverse: bool,
    pub objective_trace: Vec<f64>,
    pub ess_trace: Vec<EssSummary>,
    /// ESS of the final pass at the estimate.
    pub final_ess: EssSummary,
    /// Importance-sampling estimate of the (composite) log-likelihood at the
    /// estimate.
    pub log_likelihood: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub config: FitConfig,
    pub n_sites: usize,
    #[serde(skip)]
    pub proposals: Vec<ProposalState>,
    #[serde(skip)]
    pub site_scores: Vec<DVector<f64>>,
    pub warnings: Vec<String>,
}

/// Importance-sampling E-step for one site under the full model.
pub fn e_step_site<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &Dataset,
    site: usize,
    proposal: &MixtureProposal,
    n_particles: usize,
    rng: &mut R,
) -> Result<(SiteMoments, WeightedSample)> {
    params.check_against(data)?;
    if site >= data.n() {
        return Err(PlnError::InvalidInput(format!("site {site} out of range")));
    }
    let prior = PackedCholesky::new(&params.sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
    let species: Vec<usize> = (0..data.p()).collect();
    let target = SiteTarget::new(&prior, data, &params.b, site, &species);
    let sample = weighted_draws(&target, proposal, n_particles, rng)?;
    Ok((estimate_moments(&sample), sample))
}

/// `Sigma = (1/n) sum_i E[Z_i Z_i' | Y_i]`, symmetrized and jittered if needed.
pub fn m_step_sigma(moments: &[SiteMoments]) -> DMatrix<f64> {
    let k = moments[0].dim();
    let mut acc = DMatrix::zeros(k, k);
    for m in moments {
        acc += &m.second_moment;
    }
    regularize_spd(&(acc / moments.len() as f64)).matrix
}

/// Newton solve of the species-`j` M-step given `E[exp(Z_ij) | Y_i]`.
pub fn m_step_beta(j: usize, data: &Dataset, exp_means: &[f64], beta_init: &DVector<f64>) -> Result<DVector<f64>> {
    if j >= data.p() {
        return Err(PlnError::InvalidInput(format!("species {j} out of range")));
    }
    let y: Vec<f64> = (0..data.n()).map(|i| data.y(i, j)).collect();
    let offsets: Vec<f64> = data.offsets.column(j).iter().copied().collect();
    newton_beta(j, &data.covariates, &offsets, &y, exp_means, beta_init)
}

/// Result of [`fisher_estimate`].
#[derive(Debug, Clone)]
pub struct FisherEstimate {
    pub information: DMatrix<f64>,
    pub scores: Vec<DVector<f64>>,
    pub moments: Vec<SiteMoments>,
    pub log_likelihood: f64,
    pub ess: EssSummary,
}

/// Per-site information `(1/n) sum_i S_i S_i'` where `S_i` estimates
/// `E[grad log p(Y_i, Z_i) | Y_i]` from the same weighted particles that
/// drive the M-step statistics.
pub fn fisher_estimate(
    data: &Dataset,
    params: &ModelParams,
    proposals: &[ProposalState],
    alpha: f64,
    n_particles: usize,
    master_seed: u64,
    iteration: u64,
) -> Result<FisherEstimate> {
    params.check_against(data)?;
    if proposals.len() != data.n() {
        return Err(PlnError::DimensionMismatch("one proposal per site is required".into()));
    }
    let design = BlockDesign::single(data.p());
    let pass = engine::final_pass(data, params, &design, proposals, alpha, n_particles, master_seed, iteration)?;
    let dim = ParamLayout::new(data.d(), data.p()).dim();
    let information = weighted_outer_mean(dim, data.n(), pass.scores.iter().map(|s| (1.0, s)));
    Ok(FisherEstimate {
        information,
        scores: pass.scores,
        moments: pass.moments,
        log_likelihood: pass.log_evidence.iter().sum(),
        ess: pass.ess,
    })
}

/// Score of site `i` under the full model from its conditional moments.
pub fn site_score(data: &Dataset, params: &ModelParams, site: usize, moments: &SiteMoments) -> Result<DVector<f64>> {
    let omega = spd_inverse(&params.sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
    let species: Vec<usize> = (0..data.p()).collect();
    Ok(block_score(data, &params.b, &omega, &species, site, moments))
}

pub fn std_errors(variance: &DMatrix<f64>, n: usize) -> DVector<f64> {
    DVector::from_fn(variance.nrows(), |i, _| (variance[(i, i)] / n as f64).sqrt())
}

/// Full-likelihood ISEM.
pub fn fit_full(data: &Dataset, config: &FitConfig, init: &InitState) -> Result<FitResult> {
    let design = BlockDesign::single(data.p());
    let out = engine::run(data, config, &design, init, SigmaUpdate::ClosedForm)?;
    let mut warnings = out.warnings;
    if data.p() > 10 {
        warnings.insert(0, format!("full-likelihood importance sampling with p = {} species may degrade", data.p()));
    }
    let n_final = config.final_particle_count(out.iterations_run);
    let fisher = fisher_estimate(
        data,
        &out.params,
        &out.states,
        config.alpha,
        n_final,
        config.master_seed,
        out.iterations_run as u64,
    )?;
    let (variance, pseudo_inverse) = inverse_or_pinv(&fisher.information);
    let variance = (&variance + variance.transpose()) * 0.5;
    if pseudo_inverse {
        warnings.push("Fisher information is singular; variance uses a pseudo-inverse".into());
    }
    Ok(FitResult {
        layout: ParamLayout::new(data.d(), data.p()),
        std_errors: std_errors(&variance, data.n()),
        params: out.params,
        variance,
        information: fisher.information,
        pseudo_inverse,
        objective_trace: out.objective_trace,
        ess_trace: out.ess_trace,
        final_ess: fisher.ess,
        log_likelihood: fisher.log_likelihood,
        iterations_run: out.iterations_run,
        converged: out.converged,
        config: config.clone(),
        n_sites: data.n(),
        proposals: out.states,
        site_scores: fisher.scores,
        warnings,
    })
}

/// EM with quadrature E-steps (at most two species); returns the iterates
/// and the exact log-likelihood along the way.
pub fn fit_full_exact(data: &Dataset, params0: &ModelParams, n_iter: usize) -> Result<ExactTrace> {
    engine::exact_em(data, &BlockDesign::single(data.p()), params0, n_iter, SigmaUpdate::ClosedForm)
}
