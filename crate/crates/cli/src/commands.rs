use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use pln_core::em::design::{binomial, min_blocks};
use pln_core::em::{build_block_design, fit_composite, fit_full, BlockDesign, FitConfig, FitResult, ParticleGrowth};
use pln_core::inference::{all_subsets, significance_csv, select_model, wald_report, Adjustment, TestReport};
use pln_core::model::sample_pln;
use pln_core::rng::task_stream;
use pln_core::study::{random_covariates, run_study, StudyConfig};
use pln_core::{init_vem_lite, Dataset, ModelParams};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult, EXIT_NOT_CONVERGED, EXIT_NUMERIC};
use crate::io::{
    matrix_csv, matrix_to_rows, parse_count, parse_real, parse_table, read_input, rows_to_matrix, table_matrix, to_json,
    write_output, FileDigest, ParamsFile, SCHEMA_VERSION,
};
use crate::{BlocksArgs, DataArgs, DesignArgs, EmArgs, FitArgs, Growth, Likelihood, SelectArgs, SimstudyArgs, SimulateArgs};

/// Stream tag for design construction, apart from the E-step streams.
const DESIGN_TAG: u64 = 1;

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config: Value,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    seed: u64,
    library_version: &'static str,
    git_describe: &'static str,
    wall_clock_seconds: f64,
}

struct Run {
    command: &'static str,
    start: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self { command, start: Instant::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    fn write(&mut self, dir: &Path, name: &str, contents: &[u8]) -> CliResult<()> {
        write_output(&dir.join(name), contents, &mut self.outputs)
    }

    fn finish<C: Serialize>(self, dir: &Path, config: &C, seed: u64) -> CliResult<()> {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config: serde_json::to_value(config).map_err(|e| CliError::numeric(e.to_string()))?,
            inputs: &self.inputs,
            outputs: &self.outputs,
            seed,
            library_version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("PLN_GIT_DESCRIBE"),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        let bytes = to_json(&manifest)?;
        fs::write(dir.join("manifest.json"), bytes).map_err(|e| CliError::input(format!("manifest.json: {e}")))
    }
}

pub fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var("PLN_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::input(format!("PLN_SEED='{v}' is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Covariate matrix and names from a CSV, with the intercept rule applied.
fn load_covariates(path: Option<&Path>, n: Option<usize>, no_intercept: bool, digests: &mut Vec<FileDigest>) -> CliResult<(DMatrix<f64>, Vec<String>)> {
    let (mut x, mut names) = match path {
        Some(p) => {
            let t = parse_table(&read_input(p, digests)?, &file_label(p), parse_real)?;
            if let Some(n) = n.filter(|&n| n != t.rows.len()) {
                return Err(CliError::input(format!("{}: {} rows, expected {n} sites", file_label(p), t.rows.len())));
            }
            (table_matrix(&t), t.header)
        }
        None => (DMatrix::zeros(n.unwrap_or(0), 0), Vec::new()),
    };
    if !no_intercept {
        x = x.insert_column(0, 1.0);
        names.insert(0, "intercept".into());
    }
    if x.ncols() == 0 {
        return Err(CliError::input("no covariates: give --covariates or drop --no-intercept"));
    }
    Ok((x, names))
}

fn load_offsets(path: Option<&Path>, n: usize, p: usize, digests: &mut Vec<FileDigest>) -> CliResult<Option<DMatrix<f64>>> {
    let Some(path) = path else { return Ok(None) };
    let t = parse_table(&read_input(path, digests)?, &file_label(path), parse_real)?;
    if t.rows.len() != n || t.header.len() != p {
        return Err(CliError::input(format!(
            "{}: shape {}x{}, expected {n}x{p}",
            file_label(path),
            t.rows.len(),
            t.header.len()
        )));
    }
    Ok(Some(table_matrix(&t)))
}

fn load_data(args: &DataArgs, digests: &mut Vec<FileDigest>) -> CliResult<Dataset> {
    let counts = parse_table(&read_input(&args.counts, digests)?, &file_label(&args.counts), parse_count)?;
    let n = counts.rows.len();
    let p = counts.header.len();
    let (x, cov_names) = load_covariates(args.covariates.as_deref(), Some(n), args.no_intercept, digests)?;
    let offsets = load_offsets(args.offsets.as_deref(), n, p, digests)?;
    let offsets = offsets.unwrap_or_else(|| DMatrix::zeros(n, p));
    Ok(Dataset::with_names(table_matrix(&counts), x, offsets, counts.header, cov_names)?)
}

fn fit_config(em: &EmArgs, seed: u64) -> FitConfig {
    FitConfig {
        n_iter_max: em.max_iter,
        n_particles_initial: em.particles,
        particle_growth: match em.growth {
            Growth::Linear => ParticleGrowth::Linear,
            Growth::Constant => ParticleGrowth::Constant,
        },
        alpha: em.alpha,
        stop_lag: em.lag,
        stop_tol: em.tol,
        master_seed: seed,
        final_particles: em.final_particles,
    }
}

fn load_design(args: &DesignArgs, p: usize, seed: u64, digests: &mut Vec<FileDigest>) -> CliResult<BlockDesign> {
    if let Some(path) = &args.blocks {
        let text = String::from_utf8(read_input(path, digests)?)
            .map_err(|_| CliError::input(format!("{}: not UTF-8", file_label(path))))?;
        let design = BlockDesign::from_text(&text)?;
        if design.p() != p {
            return Err(CliError::input(format!("{}: design has p = {}, data has {p} species", file_label(path), design.p())));
        }
        return Ok(design);
    }
    let k = args
        .block_size
        .ok_or_else(|| CliError::input("composite likelihood needs --block-size or --blocks"))?;
    let mut rng = task_stream(seed, DESIGN_TAG);
    Ok(build_block_design(p, k, &mut rng, args.restarts)?)
}

pub fn simulate(args: &SimulateArgs) -> CliResult<u8> {
    let mut run = Run::new("simulate");
    let seed = resolve_seed(args.seed)?;
    let pf: ParamsFile = serde_json::from_slice(&read_input(&args.params, &mut run.inputs)?)
        .map_err(|e| CliError::input(format!("{}: {e}", file_label(&args.params))))?;
    let params = ModelParams::new(rows_to_matrix(&pf.b, "b")?, rows_to_matrix(&pf.sigma, "sigma")?)?;
    let (p, d) = (params.p(), params.d());
    let species = pf.species.clone().unwrap_or_else(|| (1..=p).map(|j| format!("sp{j}")).collect());
    if species.len() != p {
        return Err(CliError::input(format!("{} species names for p = {p}", species.len())));
    }
    let mut rng = task_stream(seed, 0);
    let generated = args.covariates.is_none();
    let (x, cov_names) = if let Some(path) = &args.covariates {
        load_covariates(Some(path), None, args.no_intercept, &mut run.inputs)?
    } else {
        let n = args.n.ok_or_else(|| CliError::input("--n is required without --covariates"))?;
        let names = pf
            .covariates
            .clone()
            .unwrap_or_else(|| std::iter::once("intercept".to_string()).chain((1..d).map(|l| format!("x{l}"))).collect());
        (random_covariates(n, d, &mut rng), names)
    };
    if x.ncols() != d || cov_names.len() != d {
        return Err(CliError::input(format!("{} covariate columns for a parameter file with d = {d}", x.ncols())));
    }
    let n = x.nrows();
    let offsets = load_offsets(args.offsets.as_deref(), n, p, &mut run.inputs)?.unwrap_or_else(|| DMatrix::zeros(n, p));
    let (data, latent) = sample_pln(&params, &x, &offsets, &mut rng)?;
    ensure_dir(&args.out)?;
    run.write(&args.out, "counts.csv", matrix_csv(&species, &data.counts).as_bytes())?;
    run.write(&args.out, "latent.csv", matrix_csv(&species, &latent.z).as_bytes())?;
    if generated && d > 1 {
        // The intercept is left out so `fit` adds it back by default.
        let extra = x.columns(1, d - 1).into_owned();
        run.write(&args.out, "covariates.csv", matrix_csv(&cov_names[1..], &extra).as_bytes())?;
    }
    run.finish(&args.out, args, seed)?;
    Ok(0)
}

#[derive(Serialize)]
struct Estimates<'a> {
    schema_version: u32,
    likelihood: Likelihood,
    species: &'a [String],
    covariates: &'a [String],
    b: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    se_b: Vec<Vec<f64>>,
    se_sigma: Vec<Vec<f64>>,
    correlation: Vec<Vec<f64>>,
    log_likelihood: f64,
    effective_dimension: Option<f64>,
    converged: bool,
    iterations: usize,
    tests: &'a TestReport,
    warnings: &'a [String],
}

fn std_error_matrices(fit: &FitResult) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = fit.layout;
    let se = &fit.std_errors;
    (
        DMatrix::from_fn(l.d, l.p, |r, j| se[l.beta_index(r, j)]),
        DMatrix::from_fn(l.p, l.p, |j, k| se[l.sigma_index(j, k)]),
    )
}

pub fn fit(args: &FitArgs) -> CliResult<u8> {
    let mut run = Run::new("fit");
    let seed = resolve_seed(args.em.seed)?;
    let data = load_data(&args.data, &mut run.inputs)?;
    let config = fit_config(&args.em, seed);
    config.validate()?;
    let init = init_vem_lite(&data, args.em.init_steps)?;
    let (fit, design, eff_dim) = match args.likelihood {
        Likelihood::Full => (fit_full(&data, &config, &init)?, None, None),
        Likelihood::Composite => {
            let design = load_design(&args.design, data.p(), seed, &mut run.inputs)?;
            let c = fit_composite(&data, &config, &design, &init)?;
            let dim = c.godambe.dim_hg;
            (c.fit, Some(design), Some(dim))
        }
    };
    let report = wald_report(&fit, &data.covariate_names, &data.species_names, args.level)?;
    let (se_b, se_sigma) = std_error_matrices(&fit);
    let estimates = Estimates {
        schema_version: SCHEMA_VERSION,
        likelihood: args.likelihood,
        species: &data.species_names,
        covariates: &data.covariate_names,
        b: matrix_to_rows(&fit.params.b),
        sigma: matrix_to_rows(&fit.params.sigma),
        se_b: matrix_to_rows(&se_b),
        se_sigma: matrix_to_rows(&se_sigma),
        correlation: matrix_to_rows(&pln_core::inference::correlation_matrix(&fit.params.sigma)),
        log_likelihood: fit.log_likelihood,
        effective_dimension: eff_dim,
        converged: fit.converged,
        iterations: fit.iterations_run,
        tests: &report,
        warnings: &fit.warnings,
    };
    let diagnostics = json!({
        "schema_version": SCHEMA_VERSION,
        "iterations": fit.iterations_run,
        "converged": fit.converged,
        "objective_trace": fit.objective_trace,
        "ess_trace": fit.ess_trace,
        "final_ess": fit.final_ess,
        "warnings": fit.warnings,
    });
    ensure_dir(&args.out)?;
    run.write(&args.out, "estimates.json", &to_json(&estimates)?)?;
    run.write(&args.out, "diagnostics.json", &to_json(&diagnostics)?)?;
    let alpha = 1.0 - args.level;
    let sig = significance_csv(&report, &data.covariate_names, &data.species_names, alpha, Adjustment::BenjaminiHochberg);
    run.write(&args.out, "significance.csv", sig.as_bytes())?;
    if let Some(design) = &design {
        run.write(&args.out, "blocks.txt", design.to_text().as_bytes())?;
    }
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    run.finish(&args.out, args, seed)?;
    if fit.converged {
        println!("converged after {} iterations", fit.iterations_run);
        Ok(0)
    } else {
        eprintln!("stopped at --max-iter {} without meeting the stopping rule; results written", fit.iterations_run);
        Ok(EXIT_NOT_CONVERGED)
    }
}

pub fn blocks(args: &BlocksArgs) -> CliResult<u8> {
    let seed = resolve_seed(args.seed)?;
    let mut rng = task_stream(seed, DESIGN_TAG);
    let design = build_block_design(args.p, args.k, &mut rng, args.restarts)?;
    println!(
        "C = {} blocks (lower bound {}, upper bound {})",
        design.n_blocks(),
        min_blocks(args.p, args.k),
        binomial(args.p, args.k)
    );
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        fs::write(out, design.to_text()).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    }
    Ok(0)
}

fn parse_covariate_sets(spec: &str, names: &[String]) -> CliResult<Vec<Vec<bool>>> {
    let mut masks = Vec::new();
    for set in spec.split(';') {
        let mut mask = vec![false; names.len()];
        mask[0] = true;
        for name in set.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "intercept") {
            let c = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::input(format!("unknown covariate '{name}' in --covariate-sets")))?;
            mask[c] = true;
        }
        masks.push(mask);
    }
    Ok(masks)
}

pub fn select(args: &SelectArgs) -> CliResult<u8> {
    let mut run = Run::new("select");
    if args.data.no_intercept {
        return Err(CliError::input("model selection requires the intercept in every subset"));
    }
    let seed = resolve_seed(args.em.seed)?;
    let data = load_data(&args.data, &mut run.inputs)?;
    let config = fit_config(&args.em, seed);
    config.validate()?;
    let masks = match &args.covariate_sets {
        Some(spec) => parse_covariate_sets(spec, &data.covariate_names)?,
        None => all_subsets(data.d()),
    };
    let design_args = DesignArgs {
        block_size: args.design.block_size.or(Some(2)),
        blocks: args.design.blocks.clone(),
        restarts: args.design.restarts,
    };
    let design = load_design(&design_args, data.p(), seed, &mut run.inputs)?;
    let selection = select_model(&data, &masks, &config, &design, args.em.init_steps)?;
    if selection.ranked.is_empty() {
        return Err(CliError::numeric("every candidate model failed to fit"));
    }
    let mut table = String::from("rank,model,covariates,cl,dim,dim_check,bic,converged\n");
    for (r, s) in selection.ranked.iter().enumerate() {
        let bits: String = s.mask.iter().map(|m| if *m { '1' } else { '0' }).collect();
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r + 1,
            bits,
            s.covariates.join(" "),
            s.cl_value,
            s.dim_estimate,
            s.dim_check,
            s.bic,
            s.converged
        ));
    }
    print!("{table}");
    for (mask, err) in &selection.failures {
        eprintln!("warning: subset {mask:?} failed: {err}");
    }
    let doc = json!({ "schema_version": SCHEMA_VERSION, "species": data.species_names, "covariates": data.covariate_names, "selection": selection });
    ensure_dir(&args.out)?;
    run.write(&args.out, "bic.csv", table.as_bytes())?;
    run.write(&args.out, "bic.json", &to_json(&doc)?)?;
    run.write(&args.out, "blocks.txt", design.to_text().as_bytes())?;
    run.finish(&args.out, args, seed)?;
    Ok(0)
}

pub fn simstudy(args: &SimstudyArgs) -> CliResult<u8> {
    let mut run = Run::new("simstudy");
    let bytes = read_input(&args.config, &mut run.inputs)?;
    let mut cfg: StudyConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("{}: {e}", file_label(&args.config))))?;
    cfg.master_seed = resolve_seed(cfg.master_seed)?;
    let report = run_study(&cfg)?;
    ensure_dir(&args.out)?;
    let doc = json!({ "schema_version": SCHEMA_VERSION, "report": report });
    run.write(&args.out, "study.json", &to_json(&doc)?)?;
    run.write(&args.out, "replicates.csv", report.replicate_csv().as_bytes())?;
    let seed = cfg.master_seed;
    run.finish(&args.out, &cfg, seed)?;
    let mut code = 0;
    for m in &report.methods {
        println!(
            "{}: {}/{} replicates, {} KS rejections at {:.3e}, coverage {:?}",
            m.label, m.n_success, cfg.replicates, m.n_rejected_bonferroni, m.bonferroni_threshold, m.coverage
        );
        if !m.reportable {
            eprintln!("{}: fewer than 80% of replicates succeeded; summaries withheld", m.label);
            code = EXIT_NUMERIC;
        }
    }
    Ok(code)
}
