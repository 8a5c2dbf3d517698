//! The E/M loop shared by the full-likelihood and composite fits. The full
//! likelihood is the design with a single block of all species, whose
//! random streams use block index 0.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::composite::m_step_sigma_composite;
use super::design::BlockDesign;
use super::full::m_step_sigma;
use super::{
    block_score, moments_or_previous, newton_beta, relative_change, weighted_draws, EssSummary, FitConfig,
    ProposalState,
};
use crate::error::{PlnError, Result};
use crate::importance::SiteMoments;
use crate::init::InitState;
use crate::linalg::{spd_inverse, PackedCholesky};
use crate::model::{Dataset, ModelParams, ParamLayout, SiteTarget};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SigmaUpdate {
    ClosedForm,
    Ascent,
}

pub(crate) struct BlockContext {
    pub species: Vec<usize>,
    pub sigma: DMatrix<f64>,
    pub prior: PackedCholesky,
}

impl BlockContext {
    pub fn new(params: &ModelParams, species: &[usize]) -> Result<Self> {
        let sigma = params.sigma.select_rows(species).select_columns(species);
        let prior = PackedCholesky::new(&sigma)
            .ok_or_else(|| PlnError::NotPositiveDefinite(format!("Sigma restricted to block {species:?}")))?;
        Ok(Self { species: species.to_vec(), sigma, prior })
    }
}

pub(crate) struct UnitOutcome {
    pub moments: SiteMoments,
    pub ess: f64,
    pub log_evidence: f64,
    pub degenerate: bool,
}

/// Run the E-step for every (block, site) unit, block-major.
pub(crate) fn e_step_all(
    data: &Dataset,
    params: &ModelParams,
    design: &BlockDesign,
    states: &[ProposalState],
    previous: Option<&[SiteMoments]>,
    alpha: f64,
    n_particles: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<UnitOutcome>> {
    let n = data.n();
    let contexts = design
        .blocks()
        .iter()
        .map(|species| BlockContext::new(params, species))
        .collect::<Result<Vec<_>>>()?;
    (0..design.n_blocks() * n)
        .into_par_iter()
        .map(|u| {
            let (b, i) = (u / n, u % n);
            let ctx = &contexts[b];
            let target = SiteTarget::new(&ctx.prior, data, &params.b, i, &ctx.species);
            let proposal = states[u].proposal(alpha, &ctx.sigma)?;
            let mut rng = stream(seed, i as u64, b as u64, iteration);
            let outcome = weighted_draws(&target, &proposal, n_particles, &mut rng);
            let (moments, sample) = moments_or_previous(outcome, previous.map(|p| &p[u]), &states[u])?;
            Ok(match sample {
                Some(s) => UnitOutcome {
                    moments,
                    ess: s.ess,
                    log_evidence: s.log_evidence(),
                    degenerate: s.ess * (n_particles as f64) < 2.0,
                },
                None => UnitOutcome { moments, ess: 0.0, log_evidence: f64::NEG_INFINITY, degenerate: true },
            })
        })
        .collect()
}

pub(crate) fn initial_states(init: &InitState, design: &BlockDesign) -> Vec<ProposalState> {
    let n = init.site_means.nrows();
    let mut states = Vec::with_capacity(n * design.n_blocks());
    for species in design.blocks() {
        for i in 0..n {
            let mean = DVector::from_iterator(species.len(), species.iter().map(|&j| init.site_means[(i, j)]));
            let vars = DVector::from_iterator(species.len(), species.iter().map(|&j| init.site_vars[(i, j)]));
            states.push(ProposalState { mean, cov: DMatrix::from_diagonal(&vars) });
        }
    }
    states
}

/// `beta_j` update with block-summed conditional exp-means; the count term
/// carries the same total block weight so the update solves the composite
/// score equation.
pub(crate) fn m_step_beta_all(
    data: &Dataset,
    design: &BlockDesign,
    moments: &[SiteMoments],
    b_current: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = (data.n(), data.p());
    let columns: Vec<Result<DVector<f64>>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            let mut lambda = 0.0;
            for &b in design.membership(j) {
                let w = design.weights()[b];
                lambda += w;
                let pos = design.block(b).iter().position(|&s| s == j).expect("membership is consistent");
                for (i, ei) in e.iter_mut().enumerate() {
                    *ei += w * moments[b * n + i].exp_mean[pos];
                }
            }
            let y: Vec<f64> = (0..n).map(|i| lambda * data.y(i, j)).collect();
            let offsets: Vec<f64> = data.offsets.column(j).iter().copied().collect();
            newton_beta(j, &data.covariates, &offsets, &y, &e, &b_current.column(j).into_owned())
        })
        .collect();
    let mut b = b_current.clone();
    for (j, col) in columns.into_iter().enumerate() {
        b.set_column(j, &col?);
    }
    Ok(b)
}

pub(crate) fn block_second_moment_sums(design: &BlockDesign, moments: &[SiteMoments], n: usize) -> Vec<DMatrix<f64>> {
    (0..design.n_blocks())
        .map(|b| {
            let k = design.block(b).len();
            let mut acc = DMatrix::zeros(k, k);
            for m in &moments[b * n..(b + 1) * n] {
                acc += &m.second_moment;
            }
            acc
        })
        .collect()
}

pub(crate) struct EngineOutput {
    pub params: ModelParams,
    pub states: Vec<ProposalState>,
    pub iterations_run: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub ess_trace: Vec<EssSummary>,
    pub warnings: Vec<String>,
}

pub(crate) fn run(
    data: &Dataset,
    config: &FitConfig,
    design: &BlockDesign,
    init: &InitState,
    mode: SigmaUpdate,
) -> Result<EngineOutput> {
    config.validate()?;
    init.validate(data)?;
    if design.p() != data.p() {
        return Err(PlnError::DimensionMismatch(format!("design has p = {}, data p = {}", design.p(), data.p())));
    }
    let n = data.n();
    let layout = ParamLayout::new(data.d(), data.p());
    let active: Vec<usize> = design
        .active_parameters(data.d())
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.then_some(i))
        .collect();
    let mut params = init.params0.clone();
    let mut states = initial_states(init, design);
    let mut previous: Option<Vec<SiteMoments>> = None;
    let mut history: Vec<DVector<f64>> = vec![layout.to_vector(&params).select_rows(&active)];
    let mut objective_trace = Vec::new();
    let mut ess_trace = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;

    for h in 0..config.n_iter_max {
        let n_particles = config.particles_at(h);
        let outcomes = e_step_all(
            data,
            &params,
            design,
            &states,
            previous.as_deref(),
            config.alpha,
            n_particles,
            config.master_seed,
            h as u64,
        )?;
        let ess: Vec<f64> = outcomes.iter().map(|o| o.ess).collect();
        let degenerate = outcomes.iter().filter(|o| o.degenerate).count();
        ess_trace.push(EssSummary::from_values(&ess, n_particles, degenerate));
        let mut objective = 0.0;
        for (u, o) in outcomes.iter().enumerate() {
            objective += design.weights()[u / n] * o.log_evidence;
        }
        objective_trace.push(objective);

        let moments: Vec<SiteMoments> = outcomes.iter().map(|o| o.moments.clone()).collect();
        params.b = m_step_beta_all(data, design, &moments, &params.b)?;
        params.sigma = match mode {
            SigmaUpdate::ClosedForm => m_step_sigma(&moments),
            SigmaUpdate::Ascent => {
                let sums = block_second_moment_sums(design, &moments, n);
                let step = m_step_sigma_composite(design, &sums, n, &params.sigma)?;
                if !step.converged {
                    warnings.push(format!("iteration {h}: Sigma ascent stopped after {} steps", step.steps));
                }
                step.sigma
            }
        };
        for (u, o) in outcomes.iter().enumerate() {
            if !o.degenerate {
                states[u] = ProposalState::from_moments(&o.moments);
            }
        }
        previous = Some(moments);
        iterations_run = h + 1;
        history.push(layout.to_vector(&params).select_rows(&active));
        if history.len() > config.stop_lag {
            let current = &history[history.len() - 1];
            let lagged = &history[history.len() - 1 - config.stop_lag];
            if relative_change(current, lagged) < config.stop_tol {
                converged = true;
                break;
            }
        }
    }
    if ess_trace.iter().any(|e| e.degenerate > 0) {
        let total: usize = ess_trace.iter().map(|e| e.degenerate).sum();
        warnings.push(format!("{total} degenerate importance samples kept their previous proposal"));
    }
    Ok(EngineOutput { params, states, iterations_run, converged, objective_trace, ess_trace, warnings })
}

/// Quantities from one extra E-step at the final estimate.
pub(crate) struct FinalPass {
    pub moments: Vec<SiteMoments>,
    pub log_evidence: Vec<f64>,
    pub ess: EssSummary,
    /// Block-local scores, block-major.
    pub scores: Vec<DVector<f64>>,
}

pub(crate) fn final_pass(
    data: &Dataset,
    params: &ModelParams,
    design: &BlockDesign,
    states: &[ProposalState],
    alpha: f64,
    n_particles: usize,
    seed: u64,
    iteration: u64,
) -> Result<FinalPass> {
    let n = data.n();
    let outcomes = e_step_all(data, params, design, states, None, alpha, n_particles, seed, iteration)?;
    let omegas = design
        .blocks()
        .iter()
        .map(|species| {
            spd_inverse(&params.sigma.select_rows(species).select_columns(species))
                .ok_or_else(|| PlnError::NotPositiveDefinite("block Sigma".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<DVector<f64>> = outcomes
        .par_iter()
        .enumerate()
        .map(|(u, o)| {
            let b = u / n;
            block_score(data, &params.b, &omegas[b], design.block(b), u % n, &o.moments)
        })
        .collect();
    let ess: Vec<f64> = outcomes.iter().map(|o| o.ess).collect();
    let degenerate = outcomes.iter().filter(|o| o.degenerate).count();
    Ok(FinalPass {
        log_evidence: outcomes.iter().map(|o| o.log_evidence).collect(),
        moments: outcomes.into_iter().map(|o| o.moments).collect(),
        ess: EssSummary::from_values(&ess, n_particles, degenerate),
        scores,
    })
}

/// Trace of an EM run whose E-step is computed by quadrature.
#[derive(Debug, Clone)]
pub struct ExactTrace {
    /// `params[h]` is the iterate before M-step `h`; the last entry is final.
    pub params: Vec<ModelParams>,
    /// Exact (composite) log-likelihood at each entry of `params`.
    pub log_lik: Vec<f64>,
}

fn exact_e_step(data: &Dataset, params: &ModelParams, design: &BlockDesign) -> Result<(Vec<SiteMoments>, f64)> {
    let n = data.n();
    let results: Vec<Result<(f64, SiteMoments)>> = (0..design.n_blocks() * n)
        .into_par_iter()
        .map(|u| {
            let (b, i) = (u / n, u % n);
            let species = design.block(b);
            let sub = params.restrict(species);
            let y: Vec<u64> = species.iter().map(|&j| data.counts[(i, j)]).collect();
            let o: Vec<f64> = species.iter().map(|&j| data.offsets[(i, j)]).collect();
            let x = data.covariates.row(i).transpose();
            crate::importance::quadrature::quadrature_site(&sub, &y, &x, &o)
        })
        .collect();
    let mut moments = Vec::with_capacity(results.len());
    let mut cl = 0.0;
    for (u, r) in results.into_iter().enumerate() {
        let (lm, m) = r?;
        cl += design.weights()[u / n] * lm;
        moments.push(m);
    }
    Ok((moments, cl))
}

pub(crate) fn exact_em(
    data: &Dataset,
    design: &BlockDesign,
    params0: &ModelParams,
    n_iter: usize,
    mode: SigmaUpdate,
) -> Result<ExactTrace> {
    if design.block_size() > 2 {
        return Err(PlnError::InvalidInput("quadrature E-steps need blocks of at most 2 species".into()));
    }
    params0.check_against(data)?;
    let n = data.n();
    let mut params = params0.clone();
    let mut trace = ExactTrace { params: Vec::new(), log_lik: Vec::new() };
    for _ in 0..n_iter {
        let (moments, cl) = exact_e_step(data, &params, design)?;
        trace.params.push(params.clone());
        trace.log_lik.push(cl);
        params.b = m_step_beta_all(data, design, &moments, &params.b)?;
        params.sigma = match mode {
            SigmaUpdate::ClosedForm => m_step_sigma(&moments),
            SigmaUpdate::Ascent => {
                let sums = block_second_moment_sums(design, &moments, n);
                m_step_sigma_composite(design, &sums, n, &params.sigma)?.sigma
            }
        };
    }
    let (_, cl) = exact_e_step(data, &params, design)?;
    trace.params.push(params);
    trace.log_lik.push(cl);
    Ok(trace)
}
