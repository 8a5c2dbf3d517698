//! Composite-likelihood ISEM over a block design and the Godambe sandwich.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use super::design::{embed_param_vector, BlockDesign};
use super::engine::{self, ExactTrace, SigmaUpdate};
use super::full::{std_errors, FitResult};
use super::{block_score, newton_beta, weighted_draws, weighted_outer_mean};
use crate::error::{PlnError, Result};
use crate::gaussian::MixtureProposal;
use crate::importance::{estimate_moments, SiteMoments, WeightedSample};
use crate::init::InitState;
use crate::linalg::{cholesky, inverse_or_pinv, spd_inverse, PackedCholesky};
use crate::model::{Dataset, ModelParams, ParamLayout, SiteTarget};

const ASCENT_MAX_STEPS: usize = 200;
const MAX_HALVINGS: usize = 50;

/// Expected complete-data composite log-likelihood in Sigma, up to a
/// constant: `sum_b lambda_b [-(n/2) log|Sigma_b| - tr(Omega_b A_b) / 2]`
/// where `A_b` sums the block second moments over sites. `None` when some
/// block covariance is not PD.
pub fn composite_sigma_objective(design: &BlockDesign, sums: &[DMatrix<f64>], n: usize, sigma: &DMatrix<f64>) -> Option<f64> {
    let mut total = 0.0;
    for (b, species) in design.blocks().iter().enumerate() {
        let sb = sigma.select_rows(species).select_columns(species);
        let chol = cholesky(&sb)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let omega = chol.inverse();
        let tr = (omega * &sums[b]).trace();
        total += design.weights()[b] * (-0.5 * n as f64 * log_det - 0.5 * tr);
    }
    Some(total)
}

/// Gradient of [`composite_sigma_objective`] with respect to the free
/// entries `sigma_jk`, `j >= k`, stored symmetrically.
pub fn composite_sigma_gradient(design: &BlockDesign, sums: &[DMatrix<f64>], n: usize, sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = sigma.nrows();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for (b, species) in design.blocks().iter().enumerate() {
        let sb = sigma.select_rows(species).select_columns(species);
        let omega = spd_inverse(&sb)?;
        let m = &omega * &sums[b] * &omega - &omega * n as f64;
        let w = design.weights()[b];
        for a in 0..species.len() {
            for c in 0..=a {
                let (j, l) = (species[a], species[c]);
                let factor = if a == c { 0.5 } else { 1.0 };
                let v = w * factor * m[(a, c)];
                g[(j, l)] += v;
                if j != l {
                    g[(l, j)] += v;
                }
            }
        }
    }
    Some(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAscent {
    pub sigma: DMatrix<f64>,
    pub objective: f64,
    pub converged: bool,
    pub steps: usize,
}

fn lower_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    (0..p).map(|j| (0..=j).map(|k| a[(j, k)] * b[(j, k)]).sum::<f64>()).sum()
}

fn lower_amax(a: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    (0..p).flat_map(|j| (0..=j).map(move |k| (j, k))).fold(0.0, |m, (j, k)| m.max(a[(j, k)].abs()))
}

/// Block-weighted average of `A_b / n - Sigma_b` per entry: the step that
/// lands on the closed-form estimate when the design is a single block.
fn moment_direction(design: &BlockDesign, sums: &[DMatrix<f64>], n: usize, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let mut num = DMatrix::<f64>::zeros(p, p);
    let mut den = DMatrix::<f64>::zeros(p, p);
    for (b, species) in design.blocks().iter().enumerate() {
        let w = design.weights()[b];
        for (a, &j) in species.iter().enumerate() {
            for (c, &l) in species.iter().enumerate() {
                num[(j, l)] += w * (sums[b][(a, c)] / n as f64 - sigma[(j, l)]);
                den[(j, l)] += w;
            }
        }
    }
    num.zip_map(&den, |x, w| if w > 0.0 { x / w } else { 0.0 })
}

/// Gradient ascent on the composite Sigma objective with backtracking. Each
/// accepted step keeps Sigma PD and does not lower the objective. Entries
/// for species pairs the design does not cover never move.
pub fn m_step_sigma_composite(
    design: &BlockDesign,
    sums: &[DMatrix<f64>],
    n: usize,
    sigma_init: &DMatrix<f64>,
) -> Result<SigmaAscent> {
    if sums.len() != design.n_blocks() {
        return Err(PlnError::DimensionMismatch("one second-moment sum per block is required".into()));
    }
    for (b, s) in sums.iter().enumerate() {
        let k = design.block(b).len();
        if s.shape() != (k, k) {
            return Err(PlnError::DimensionMismatch(format!("block {b} sum is {:?}, expected {k}x{k}", s.shape())));
        }
    }
    let mut sigma = sigma_init.clone();
    let mut f = composite_sigma_objective(design, sums, n, &sigma)
        .ok_or_else(|| PlnError::NotPositiveDefinite("initial Sigma".into()))?;
    let tol = 1e-6 * n as f64;
    let mut grad_step = 1.0 / (n as f64 * design.n_blocks() as f64);
    let try_step = |sigma: &DMatrix<f64>, dir: &DMatrix<f64>, t0: f64, f0: f64| -> Option<(DMatrix<f64>, f64, f64)> {
        let mut t = t0;
        for _ in 0..MAX_HALVINGS {
            let cand = sigma + dir * t;
            if cholesky(&cand).is_some() {
                if let Some(fc) = composite_sigma_objective(design, sums, n, &cand) {
                    if fc >= f0 {
                        return Some((cand, fc, t));
                    }
                }
            }
            t *= 0.5;
        }
        None
    };
    for step in 0..ASCENT_MAX_STEPS {
        let g = composite_sigma_gradient(design, sums, n, &sigma)
            .ok_or_else(|| PlnError::NotPositiveDefinite("Sigma during ascent".into()))?;
        if lower_amax(&g) < tol {
            return Ok(SigmaAscent { sigma, objective: f, converged: true, steps: step });
        }
        let d = moment_direction(design, sums, n, &sigma);
        let mut moved = false;
        if lower_dot(&g, &d) > 0.0 {
            if let Some((cand, fc, _)) = try_step(&sigma, &d, 1.0, f) {
                moved = cand != sigma;
                sigma = cand;
                f = fc;
            }
        }
        if !moved {
            match try_step(&sigma, &g, grad_step, f) {
                Some((cand, fc, t)) if cand != sigma => {
                    sigma = cand;
                    f = fc;
                    grad_step = 2.0 * t;
                }
                _ => return Ok(SigmaAscent { sigma, objective: f, converged: false, steps: step }),
            }
        }
    }
    let g = composite_sigma_gradient(design, sums, n, &sigma)
        .ok_or_else(|| PlnError::NotPositiveDefinite("Sigma during ascent".into()))?;
    Ok(SigmaAscent { converged: lower_amax(&g) < tol, sigma, objective: f, steps: ASCENT_MAX_STEPS })
}

/// Composite `beta_j` update from per-block conditional exp-means
/// (`exp_means[b][i]`, blocks in the order of `design.membership(j)`).
pub fn m_step_beta_composite(
    j: usize,
    data: &Dataset,
    design: &BlockDesign,
    exp_means: &[Vec<f64>],
    beta_init: &DVector<f64>,
) -> Result<DVector<f64>> {
    let members = design.membership(j);
    if members.is_empty() || exp_means.len() != members.len() {
        return Err(PlnError::InvalidInput(format!("need one exp-mean vector per block holding species {j}")));
    }
    let n = data.n();
    let mut e = vec![0.0; n];
    let mut lambda = 0.0;
    for (&b, em) in members.iter().zip(exp_means) {
        if em.len() != n {
            return Err(PlnError::DimensionMismatch("exp-mean vector length differs from n".into()));
        }
        let w = design.weights()[b];
        lambda += w;
        for (ei, v) in e.iter_mut().zip(em) {
            *ei += w * v;
        }
    }
    let y: Vec<f64> = (0..n).map(|i| lambda * data.y(i, j)).collect();
    let offsets: Vec<f64> = data.offsets.column(j).iter().copied().collect();
    newton_beta(j, &data.covariates, &offsets, &y, &e, beta_init)
}

/// Result of one block E-step.
#[derive(Debug, Clone)]
pub struct BlockEStep {
    pub moments: SiteMoments,
    /// Block score embedded in the full parameter ordering.
    pub score: DVector<f64>,
    pub sample: WeightedSample,
}

/// Importance-sampling E-step of block `b` at site `i` against the block
/// sub-model.
pub fn composite_e_step<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &Dataset,
    design: &BlockDesign,
    b: usize,
    site: usize,
    proposal: &MixtureProposal,
    n_particles: usize,
    rng: &mut R,
) -> Result<BlockEStep> {
    params.check_against(data)?;
    if b >= design.n_blocks() || site >= data.n() {
        return Err(PlnError::InvalidInput(format!("block {b} or site {site} out of range")));
    }
    let species = design.block(b);
    let sb = params.sigma.select_rows(species).select_columns(species);
    let prior = PackedCholesky::new(&sb).ok_or_else(|| PlnError::NotPositiveDefinite("block Sigma".into()))?;
    let target = SiteTarget::new(&prior, data, &params.b, site, species);
    let sample = weighted_draws(&target, proposal, n_particles, rng)?;
    let moments = estimate_moments(&sample);
    let omega = spd_inverse(&sb).ok_or_else(|| PlnError::NotPositiveDefinite("block Sigma".into()))?;
    let local = block_score(data, &params.b, &omega, species, site, &moments);
    let score = embed_param_vector(species, &local, data.p(), data.d())?;
    Ok(BlockEStep { moments, score, sample })
}

#[derive(Debug, Clone, Serialize)]
pub struct Godambe {
    pub h: DMatrix<f64>,
    pub j: DMatrix<f64>,
    /// `H J^{-1} H` on the identified coordinates, zero elsewhere.
    pub g: DMatrix<f64>,
    /// `G^{-1}` on the identified coordinates, NaN elsewhere.
    pub variance: DMatrix<f64>,
    /// `tr(H G^{-1})`.
    pub dim_hg: f64,
    /// `tr(J H^{-1})`, equal to `dim_hg` in exact arithmetic.
    pub dim_jh: f64,
    pub pseudo_inverse: bool,
    pub active: Vec<bool>,
}

/// Godambe plug-ins from embedded block scores `scores[i][b]`:
/// `J = (1/n) sum_i S_i S_i'` with `S_i = sum_b lambda_b S_i^(b)`, and
/// `H = (1/n) sum_i sum_b lambda_b S_i^(b) S_i^(b)'`.
pub fn godambe_estimate(scores: &[Vec<DVector<f64>>], design: &BlockDesign, n: usize) -> Result<Godambe> {
    if scores.len() != n || scores.iter().any(|s| s.len() != design.n_blocks()) {
        return Err(PlnError::DimensionMismatch("scores must be indexed [site][block]".into()));
    }
    let dim = scores[0][0].len();
    let d = dim.checked_sub(design.p() * (design.p() + 1) / 2).map(|v| v / design.p()).unwrap_or(0);
    if ParamLayout::new(d, design.p()).dim() != dim {
        return Err(PlnError::DimensionMismatch("score length does not match the design".into()));
    }
    let weights = design.weights();
    let totals: Vec<DVector<f64>> = scores
        .iter()
        .map(|per_block| {
            let mut s = DVector::zeros(dim);
            for (b, v) in per_block.iter().enumerate() {
                s.axpy(weights[b], v, 1.0);
            }
            s
        })
        .collect();
    let j = weighted_outer_mean(dim, n, totals.iter().map(|s| (1.0, s)));
    let h = weighted_outer_mean(
        dim,
        n,
        (0..design.n_blocks()).flat_map(|b| scores.iter().map(move |per_block| (weights[b], &per_block[b]))),
    );
    let active = design.active_parameters(d);
    let idx: Vec<usize> = active.iter().enumerate().filter_map(|(i, a)| a.then_some(i)).collect();
    let hs = h.select_rows(&idx).select_columns(&idx);
    let js = j.select_rows(&idx).select_columns(&idx);
    let (j_inv, flag_j) = inverse_or_pinv(&js);
    let gs = &hs * &j_inv * &hs;
    let gs = (&gs + gs.transpose()) * 0.5;
    let (g_inv, flag_g) = inverse_or_pinv(&gs);
    let g_inv = (&g_inv + g_inv.transpose()) * 0.5;
    let (h_inv, flag_h) = inverse_or_pinv(&hs);
    let dim_hg = (&hs * &g_inv).trace();
    let dim_jh = (&js * &h_inv).trace();
    let mut g = DMatrix::zeros(dim, dim);
    let mut variance = DMatrix::from_element(dim, dim, f64::NAN);
    for (a, &ia) in idx.iter().enumerate() {
        for (c, &ic) in idx.iter().enumerate() {
            g[(ia, ic)] = gs[(a, c)];
            variance[(ia, ic)] = g_inv[(a, c)];
        }
    }
    Ok(Godambe { h, j, g, variance, dim_hg, dim_jh, pseudo_inverse: flag_j || flag_g || flag_h, active })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompositeFitResult {
    /// Estimates and diagnostics; `variance` is the Godambe variance and
    /// `information` the Godambe matrix.
    pub fit: FitResult,
    pub design: BlockDesign,
    pub godambe: Godambe,
    /// Importance-sampling estimate of the composite log-likelihood at the
    /// estimate, `sum_b lambda_b sum_i log p(Y_i^(b))`.
    pub cl_value: f64,
    /// Block-local final scores, block-major (`b * n + i`).
    #[serde(skip)]
    pub block_scores: Vec<DVector<f64>>,
}

impl CompositeFitResult {
    pub fn embedded_score(&self, site: usize, b: usize) -> DVector<f64> {
        let n = self.fit.n_sites;
        let layout = self.fit.layout;
        embed_param_vector(self.design.block(b), &self.block_scores[b * n + site], layout.p, layout.d)
            .expect("stored scores match the design")
    }
}

fn restrict_to_design(sigma: &DMatrix<f64>, design: &BlockDesign) -> DMatrix<f64> {
    DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |j, k| if design.covers(j, k) { sigma[(j, k)] } else { 0.0 })
}

/// Composite ISEM over a fixed block design.
pub fn fit_composite(data: &Dataset, config: &crate::em::FitConfig, design: &BlockDesign, init: &InitState) -> Result<CompositeFitResult> {
    let mut init = init.clone();
    if !design.covers_all_pairs() {
        init.params0.sigma = restrict_to_design(&init.params0.sigma, design);
        if cholesky(&init.params0.sigma).is_none() {
            let d = init.params0.sigma.diagonal();
            init.params0.sigma = DMatrix::from_diagonal(&d);
        }
    }
    let out = engine::run(data, config, design, &init, SigmaUpdate::Ascent)?;
    let n = data.n();
    let n_final = config.final_particle_count(out.iterations_run);
    let pass = engine::final_pass(
        data,
        &out.params,
        design,
        &out.states,
        config.alpha,
        n_final,
        config.master_seed,
        out.iterations_run as u64,
    )?;
    let scores: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|i| {
            (0..design.n_blocks())
                .map(|b| embed_param_vector(design.block(b), &pass.scores[b * n + i], data.p(), data.d()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let godambe = godambe_estimate(&scores, design, n)?;
    let mut warnings = out.warnings;
    if godambe.pseudo_inverse {
        warnings.push("Godambe matrices are singular; variance uses a pseudo-inverse".into());
    }
    let cl_value: f64 = pass
        .log_evidence
        .iter()
        .enumerate()
        .map(|(u, l)| design.weights()[u / n] * l)
        .sum();
    let fit = FitResult {
        layout: ParamLayout::new(data.d(), data.p()),
        std_errors: std_errors(&godambe.variance, n),
        params: out.params,
        variance: godambe.variance.clone(),
        information: godambe.g.clone(),
        pseudo_inverse: godambe.pseudo_inverse,
        objective_trace: out.objective_trace,
        ess_trace: out.ess_trace,
        final_ess: pass.ess,
        log_likelihood: cl_value,
        iterations_run: out.iterations_run,
        converged: out.converged,
        config: config.clone(),
        n_sites: n,
        proposals: out.states,
        site_scores: scores
            .iter()
            .map(|per_block| {
                let mut s = DVector::zeros(godambe.h.nrows());
                for (b, v) in per_block.iter().enumerate() {
                    s.axpy(design.weights()[b], v, 1.0);
                }
                s
            })
            .collect(),
        warnings,
    };
    Ok(CompositeFitResult { fit, design: design.clone(), godambe, cl_value, block_scores: pass.scores })
}

/// Composite EM with quadrature E-steps (blocks of at most two species).
pub fn fit_composite_exact(data: &Dataset, design: &BlockDesign, params0: &ModelParams, n_iter: usize) -> Result<ExactTrace> {
    let mut start = params0.clone();
    if !design.covers_all_pairs() {
        start.sigma = restrict_to_design(&start.sigma, design);
    }
    engine::exact_em(data, design, &start, n_iter, SigmaUpdate::Ascent)
}
