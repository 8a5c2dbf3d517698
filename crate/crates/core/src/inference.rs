//! Wald tests, confidence intervals, multiplicity adjustments, CL-BIC and
//! covariate-subset selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::em::{fit_composite, BlockDesign, CompositeFitResult, FitConfig, FitResult};
use crate::error::{PlnError, Result};
use crate::init::init_vem_lite;
use crate::model::Dataset;
use crate::rng::derive_seed;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `2 (1 - Phi(|z|))`, computed through `erfc` to keep tail accuracy.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

pub fn standardized_estimate(estimate: f64, truth: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(PlnError::InvalidInput(format!("variance must be positive, got {variance}")));
    }
    Ok((estimate - truth) / variance.sqrt())
}

pub fn bonferroni(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter().map(|v| (v * m).min(1.0)).collect()
}

/// Benjamini-Hochberg step-up adjusted p-values.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank_from_top, &idx) in order.iter().enumerate() {
        let rank = m - rank_from_top;
        running = running.min(p[idx] * m as f64 / rank as f64);
        out[idx] = running.min(1.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Beta,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestEntry {
    pub name: String,
    pub index: usize,
    pub family: Family,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Adjusted within the entry's family.
    pub p_bonferroni: f64,
    pub p_bh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEntry {
    pub species: (String, String),
    pub rho: f64,
    /// p-value of the covariance entry `sigma_jk`; no delta method.
    pub p_value: f64,
    pub p_bh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub level: f64,
    pub entries: Vec<TestEntry>,
    pub correlations: Vec<CorrelationEntry>,
    pub pseudo_inverse: bool,
}

/// Wald tests and intervals for every identified parameter. Multiplicity
/// corrections are applied separately to the regression and covariance
/// families.
pub fn wald_report(fit: &FitResult, covariates: &[String], species: &[String], level: f64) -> Result<TestReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PlnError::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let layout = fit.layout;
    if covariates.len() != layout.d || species.len() != layout.p {
        return Err(PlnError::DimensionMismatch("name lists do not match the fit".into()));
    }
    let names = layout.names(covariates, species);
    let theta = layout.to_vector(&fit.params);
    let q = normal_quantile(0.5 + 0.5 * level);
    let mut entries = Vec::new();
    for idx in 0..layout.dim() {
        let se = fit.std_errors[idx];
        if !se.is_finite() {
            continue;
        }
        let est = theta[idx];
        let z = if se > 0.0 { est / se } else if est == 0.0 { 0.0 } else { f64::INFINITY.copysign(est) };
        entries.push(TestEntry {
            name: names[idx].clone(),
            index: idx,
            family: if idx < layout.n_beta() { Family::Beta } else { Family::Sigma },
            estimate: est,
            std_error: se,
            z,
            p_value: two_sided_p(z),
            ci_lower: est - q * se,
            ci_upper: est + q * se,
            p_bonferroni: 1.0,
            p_bh: 1.0,
        });
    }
    for family in [Family::Beta, Family::Sigma] {
        let members: Vec<usize> = (0..entries.len()).filter(|&e| entries[e].family == family).collect();
        let p: Vec<f64> = members.iter().map(|&e| entries[e].p_value).collect();
        for ((&e, bf), bh) in members.iter().zip(bonferroni(&p)).zip(benjamini_hochberg(&p)) {
            entries[e].p_bonferroni = bf;
            entries[e].p_bh = bh;
        }
    }
    let sigma = &fit.params.sigma;
    let mut correlations = Vec::new();
    for j in 0..layout.p {
        for k in 0..j {
            if let Some(e) = entries.iter().find(|e| e.index == layout.sigma_index(j, k)) {
                correlations.push(CorrelationEntry {
                    species: (species[j].clone(), species[k].clone()),
                    rho: sigma[(j, k)] / (sigma[(j, j)] * sigma[(k, k)]).sqrt(),
                    p_value: e.p_value,
                    p_bh: e.p_bh,
                });
            }
        }
    }
    Ok(TestReport { level, entries, correlations, pseudo_inverse: fit.pseudo_inverse })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjustment {
    None,
    Bonferroni,
    BenjaminiHochberg,
}

/// Significance matrix as CSV: `+` for a significant positive estimate,
/// `-` for a significant negative one, empty otherwise. Covariate rows come
/// first, then one row per species for the covariance entries.
pub fn significance_csv(report: &TestReport, covariates: &[String], species: &[String], alpha: f64, adjustment: Adjustment) -> String {
    let p = species.len();
    let d = covariates.len();
    let layout = crate::model::ParamLayout::new(d, p);
    let cell = |idx: usize| -> &'static str {
        let Some(e) = report.entries.iter().find(|e| e.index == idx) else { return "" };
        let pv = match adjustment {
            Adjustment::None => e.p_value,
            Adjustment::Bonferroni => e.p_bonferroni,
            Adjustment::BenjaminiHochberg => e.p_bh,
        };
        match (pv < alpha, e.estimate > 0.0) {
            (true, true) => "+",
            (true, false) => "-",
            _ => "",
        }
    };
    let mut out = String::from("term");
    for s in species {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (l, c) in covariates.iter().enumerate() {
        out.push_str(c);
        for j in 0..p {
            out.push(',');
            out.push_str(cell(layout.beta_index(l, j)));
        }
        out.push('\n');
    }
    for (j, s) in species.iter().enumerate() {
        out.push_str(s);
        for k in 0..p {
            out.push(',');
            out.push_str(cell(layout.sigma_index(j, k)));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScore {
    pub mask: Vec<bool>,
    pub covariates: Vec<String>,
    pub cl_value: f64,
    /// `tr(H G^{-1})`.
    pub dim_estimate: f64,
    /// `tr(J H^{-1})`.
    pub dim_check: f64,
    pub dims_agree: bool,
    pub bic: f64,
    pub n_free: usize,
    pub converged: bool,
}

/// `BIC = cl - (log n / 2) tr(H G^{-1})`.
pub fn cl_bic(fit: &CompositeFitResult, mask: Vec<bool>, covariates: Vec<String>) -> ModelScore {
    let n = fit.fit.n_sites as f64;
    let g = &fit.godambe;
    let dims_agree = (g.dim_hg - g.dim_jh).abs() <= 1e-6 * g.dim_hg.abs().max(1.0);
    ModelScore {
        mask,
        covariates,
        cl_value: fit.cl_value,
        dim_estimate: g.dim_hg,
        dim_check: g.dim_jh,
        dims_agree,
        bic: fit.cl_value - 0.5 * n.ln() * g.dim_hg,
        n_free: g.active.iter().filter(|a| **a).count(),
        converged: fit.fit.converged,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    /// Scores sorted by decreasing BIC.
    pub ranked: Vec<ModelScore>,
    /// Best model for each number of selected covariates, as
    /// `(count, index into ranked)`.
    pub best_by_size: Vec<(usize, usize)>,
    pub failures: Vec<(Vec<bool>, String)>,
}

impl Selection {
    pub fn best(&self) -> Option<&ModelScore> {
        self.ranked.first()
    }
}

pub fn mask_bits(mask: &[bool]) -> u64 {
    mask.iter().enumerate().fold(0u64, |acc, (i, &m)| if m { acc | (1u64 << (i % 64)) } else { acc })
}

/// Fit one composite model per covariate mask over a shared design and rank
/// them by CL-BIC. Column 0 (the intercept) must be in every mask. Each fit
/// uses a seed derived from the master seed and the mask.
pub fn select_model(
    data: &Dataset,
    masks: &[Vec<bool>],
    config: &FitConfig,
    design: &BlockDesign,
    init_steps: usize,
) -> Result<Selection> {
    if masks.is_empty() {
        return Err(PlnError::InvalidInput("no covariate subsets given".into()));
    }
    for m in masks {
        if m.len() != data.d() {
            return Err(PlnError::DimensionMismatch(format!("mask of length {} for d = {}", m.len(), data.d())));
        }
        if !m[0] {
            return Err(PlnError::InvalidInput("every subset must include the intercept column".into()));
        }
    }
    let results: Vec<(Vec<bool>, Result<ModelScore>)> = masks
        .par_iter()
        .map(|mask| {
            let score = (|| {
                let cols: Vec<usize> = mask.iter().enumerate().filter_map(|(i, m)| m.then_some(i)).collect();
                let sub = data.select_covariates(&cols)?;
                let init = init_vem_lite(&sub, init_steps)?;
                let cfg = FitConfig { master_seed: derive_seed(config.master_seed, mask_bits(mask)), ..config.clone() };
                let fit = fit_composite(&sub, &cfg, design, &init)?;
                Ok(cl_bic(&fit, mask.clone(), sub.covariate_names.clone()))
            })();
            (mask.clone(), score)
        })
        .collect();
    let mut ranked = Vec::new();
    let mut failures = Vec::new();
    for (mask, r) in results {
        match r {
            Ok(s) => ranked.push(s),
            Err(e) => failures.push((mask, e.to_string())),
        }
    }
    ranked.sort_by(|a, b| b.bic.total_cmp(&a.bic));
    let mut best_by_size: Vec<(usize, usize)> = Vec::new();
    for (i, s) in ranked.iter().enumerate() {
        let size = s.mask.iter().filter(|m| **m).count();
        if !best_by_size.iter().any(|(c, _)| *c == size) {
            best_by_size.push((size, i));
        }
    }
    best_by_size.sort_unstable();
    Ok(Selection { ranked, best_by_size, failures })
}

/// All subsets of the non-intercept columns, intercept always included.
pub fn all_subsets(d: usize) -> Vec<Vec<bool>> {
    let extra = d.saturating_sub(1);
    (0..(1usize << extra))
        .map(|bits| (0..d).map(|c| c == 0 || (bits >> (c - 1)) & 1 == 1).collect())
        .collect()
}

/// Pearson correlation matrix of a covariance matrix.
pub fn correlation_matrix(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |j, k| sigma[(j, k)] / (sigma[(j, j)] * sigma[(k, k)]).sqrt())
}
