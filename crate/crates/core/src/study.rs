//! Replicated simulation studies: standardized-estimate normality via
//! Kolmogorov-Smirnov, interval coverage and ESS summaries.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{build_block_design, fit_composite, fit_full, BlockDesign, EssSummary, FitConfig, FitResult};
use crate::error::{PlnError, Result};
use crate::inference::{normal_cdf, standardized_estimate};
use crate::init::init_vem_lite;
use crate::model::{sample_pln, ModelParams, ParamLayout};
use crate::rng::{derive_seed, task_stream};

const KS_TERMS: usize = 100;
const Z_975: f64 = 1.959_963_984_540_054;

/// `P(K > x)` for the limiting Kolmogorov distribution, truncated at 100
/// terms. For small `x` the alternating series converges slowly, so the
/// Jacobi theta form of the CDF is used instead.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for k in 1..=KS_TERMS {
            let m = (2 * k - 1) as f64;
            cdf += (-m * m * pi2 / (8.0 * x * x)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / x;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=KS_TERMS {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against N(0, 1). The p-value uses the asymptotic law of
/// `(sqrt(M) + 0.12 + 0.11 / sqrt(M)) D`.
pub fn ks_test(sample: &[f64]) -> Result<KsResult> {
    if sample.len() < 2 {
        return Err(PlnError::InvalidInput("KS test needs at least 2 values".into()));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(PlnError::InvalidInput("non-finite value in KS sample".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let mut d = 0.0f64;
    for (i, v) in s.iter().enumerate() {
        let f = normal_cdf(*v);
        d = d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    let d = d.clamp(0.0, 1.0);
    let rm = m.sqrt();
    Ok(KsResult { statistic: d, p_value: kolmogorov_sf((rm + 0.12 + 0.11 / rm) * d) })
}

/// Random truth: `B` entries uniform on (-0.5, 0.5) and `Sigma` the
/// correlation matrix of a Wishart draw with `p + 2` degrees of freedom.
pub fn random_truth<R: Rng + ?Sized>(p: usize, d: usize, rng: &mut R) -> ModelParams {
    let b = DMatrix::from_fn(d, p, |_, _| 0.5 * rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(p, p + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = &a * a.transpose();
    let sigma = DMatrix::from_fn(p, p, |j, k| w[(j, k)] / (w[(j, j)] * w[(k, k)]).sqrt());
    let sigma = 0.5 * (&sigma + sigma.transpose());
    ModelParams { b, sigma }
}

/// Intercept column followed by `d - 1` standard normal columns.
pub fn random_covariates<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "k")]
pub enum Method {
    Full,
    Composite(usize),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Full => "full".into(),
            Method::Composite(k) => format!("cl{k}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub methods: Vec<Method>,
    pub replicates: usize,
    /// Generated from the master seed when absent.
    pub truth: Option<ModelParams>,
    pub fit: FitConfig,
    pub master_seed: u64,
    pub init_steps: usize,
    pub design_restarts: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 5,
            d: 3,
            methods: vec![Method::Composite(2)],
            replicates: 50,
            truth: None,
            fit: FitConfig::default(),
            master_seed: 1,
            init_steps: 50,
            design_restarts: 20,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(PlnError::InvalidInput("a study needs at least 2 replicates".into()));
        }
        if self.n == 0 || self.p == 0 || self.d == 0 {
            return Err(PlnError::InvalidInput("n, p and d must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(PlnError::InvalidInput("no methods requested".into()));
        }
        for m in &self.methods {
            if let Method::Composite(k) = m {
                if *k < 2 || *k > self.p {
                    return Err(PlnError::InvalidInput(format!("block size {k} outside [2, {}]", self.p)));
                }
            }
        }
        if let Some(t) = &self.truth {
            t.validate()?;
            if t.p() != self.p || t.d() != self.d {
                return Err(PlnError::DimensionMismatch("truth does not match (p, d)".into()));
            }
        }
        self.fit.validate()
    }

    pub fn resolved_truth(&self) -> ModelParams {
        self.truth.clone().unwrap_or_else(|| {
            let mut rng = task_stream(self.master_seed, u64::MAX - 1);
            random_truth(self.p, self.d, &mut rng)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Regression coefficients in layout order (`j * d + l`).
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub standardized: Vec<f64>,
    pub covered: Vec<bool>,
    pub seconds: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_ess: EssSummary,
    pub ess_median_trace: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub label: String,
    pub coefficient_names: Vec<String>,
    pub n_blocks: usize,
    pub ks: Vec<KsResult>,
    pub coverage: Vec<f64>,
    pub n_success: usize,
    /// At least 80% of replicates succeeded.
    pub reportable: bool,
    pub bonferroni_threshold: f64,
    pub n_rejected_bonferroni: usize,
    pub replicates: Vec<ReplicateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub truth: ModelParams,
    pub methods: Vec<MethodReport>,
}

fn replicate_record(replicate: usize, fit: &FitResult, truth: &ModelParams, seconds: f64) -> ReplicateRecord {
    let layout = fit.layout;
    let theta = layout.to_vector(&fit.params);
    let true_theta = layout.to_vector(truth);
    let nb = layout.n_beta();
    let mut standardized = Vec::with_capacity(nb);
    let mut covered = Vec::with_capacity(nb);
    for idx in 0..nb {
        let var = fit.std_errors[idx].powi(2);
        let z = standardized_estimate(theta[idx], true_theta[idx], var).unwrap_or(f64::NAN);
        standardized.push(z);
        covered.push(z.abs() <= Z_975);
    }
    ReplicateRecord {
        replicate,
        estimates: theta.rows(0, nb).iter().copied().collect(),
        std_errors: fit.std_errors.rows(0, nb).iter().copied().collect(),
        standardized,
        covered,
        seconds,
        iterations: fit.iterations_run,
        converged: fit.converged,
        final_ess: fit.final_ess,
        ess_median_trace: fit.ess_trace.iter().map(|e| e.median).collect(),
        error: None,
    }
}

fn failed_record(replicate: usize, error: String, seconds: f64) -> ReplicateRecord {
    ReplicateRecord {
        replicate,
        estimates: Vec::new(),
        std_errors: Vec::new(),
        standardized: Vec::new(),
        covered: Vec::new(),
        seconds,
        iterations: 0,
        converged: false,
        final_ess: EssSummary { min: f64::NAN, median: f64::NAN, n_particles: 0, degenerate: 0 },
        ess_median_trace: Vec::new(),
        error: Some(error),
    }
}

fn run_replicate(cfg: &StudyConfig, truth: &ModelParams, method: Method, design: Option<&BlockDesign>, m: usize) -> ReplicateRecord {
    let start = Instant::now();
    let outcome = (|| -> Result<FitResult> {
        let mut rng = task_stream(cfg.master_seed, m as u64);
        let x = random_covariates(cfg.n, cfg.d, &mut rng);
        let o = DMatrix::zeros(cfg.n, cfg.p);
        let (data, _) = sample_pln(truth, &x, &o, &mut rng)?;
        let init = init_vem_lite(&data, cfg.init_steps)?;
        let fit_cfg = FitConfig { master_seed: derive_seed(cfg.master_seed, m as u64), ..cfg.fit.clone() };
        match (method, design) {
            (Method::Composite(_), Some(design)) => Ok(fit_composite(&data, &fit_cfg, design, &init)?.fit),
            _ => fit_full(&data, &fit_cfg, &init),
        }
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(fit) => replicate_record(m, &fit, truth, seconds),
        Err(e) => failed_record(m, e.to_string(), seconds),
    }
}

/// Run every method on `replicates` simulated datasets. Replicate `m` draws
/// its data from stream `(master_seed, m)`; the design for each block size is
/// built once and shared across replicates.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let truth = cfg.resolved_truth();
    let layout = ParamLayout::new(cfg.d, cfg.p);
    let cov_names: Vec<String> = (0..cfg.d).map(|l| format!("x{l}")).collect();
    let sp_names: Vec<String> = (1..=cfg.p).map(|j| format!("sp{j}")).collect();
    let coefficient_names = layout.names(&cov_names, &sp_names)[..layout.n_beta()].to_vec();
    let nb = layout.n_beta();
    let mut methods = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let design = match method {
            Method::Composite(k) => {
                let mut rng = task_stream(cfg.master_seed, u64::MAX - 2 - mi as u64);
                Some(build_block_design(cfg.p, k, &mut rng, cfg.design_restarts)?)
            }
            Method::Full => None,
        };
        let replicates: Vec<ReplicateRecord> = (0..cfg.replicates)
            .into_par_iter()
            .map(|m| run_replicate(cfg, &truth, method, design.as_ref(), m))
            .collect();
        let ok: Vec<&ReplicateRecord> =
            replicates.iter().filter(|r| r.error.is_none() && r.standardized.iter().all(|z| z.is_finite())).collect();
        let n_success = ok.len();
        let reportable = n_success * 5 >= cfg.replicates * 4 && n_success >= 2;
        let mut ks = Vec::with_capacity(nb);
        let mut coverage = Vec::with_capacity(nb);
        for idx in 0..nb {
            if reportable {
                let sample: Vec<f64> = ok.iter().map(|r| r.standardized[idx]).collect();
                ks.push(ks_test(&sample)?);
                coverage.push(ok.iter().filter(|r| r.covered[idx]).count() as f64 / n_success as f64);
            } else {
                ks.push(KsResult { statistic: f64::NAN, p_value: f64::NAN });
                coverage.push(f64::NAN);
            }
        }
        let bonferroni_threshold = 0.05 / nb as f64;
        let n_rejected_bonferroni = ks.iter().filter(|k| k.p_value < bonferroni_threshold).count();
        methods.push(MethodReport {
            method,
            label: method.label(),
            coefficient_names: coefficient_names.clone(),
            n_blocks: design.as_ref().map_or(1, |d| d.n_blocks()),
            ks,
            coverage,
            n_success,
            reportable,
            bonferroni_threshold,
            n_rejected_bonferroni,
            replicates,
        });
    }
    Ok(StudyReport { config: cfg.clone(), truth, methods })
}

impl StudyReport {
    /// Flat CSV with one row per (method, replicate, coefficient).
    pub fn replicate_csv(&self) -> String {
        let mut out = String::from("method,replicate,coefficient,estimate,std_error,standardized,covered,seconds\n");
        for m in &self.methods {
            for r in &m.replicates {
                if r.error.is_some() {
                    continue;
                }
                for (c, name) in m.coefficient_names.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        m.label, r.replicate, name, r.estimates[c], r.std_errors[c], r.standardized[c], r.covered[c], r.seconds
                    ));
                }
            }
        }
        out
    }
}
