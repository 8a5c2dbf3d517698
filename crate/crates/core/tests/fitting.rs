//! End-to-end checks of the fitting routines on small simulated data.

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use pln_core::em::{build_block_design, fit_composite, fit_full, fit_full_exact, BlockDesign, FitConfig, ParticleGrowth};
use pln_core::importance::quadrature::quadrature_oracle;
use pln_core::inference::{cl_bic, select_model, wald_report};
use pln_core::init::{init_moment, init_vem_lite};
use pln_core::model::{sample_pln, Dataset, ModelParams, ParamLayout};
use pln_core::rng::task_stream;
use pln_core::study::{random_covariates, random_truth, run_study, Method, StudyConfig};

fn small_config(seed: u64) -> FitConfig {
    FitConfig {
        n_iter_max: 30,
        n_particles_initial: 40,
        particle_growth: ParticleGrowth::Constant,
        stop_lag: 10,
        master_seed: seed,
        final_particles: Some(400),
        ..FitConfig::default()
    }
}

fn simulated(n: usize, p: usize, d: usize, seed: u64) -> (ModelParams, Dataset) {
    let mut rng = task_stream(seed, 0);
    let truth = random_truth(p, d, &mut rng);
    let x = random_covariates(n, d, &mut rng);
    let (data, _) = sample_pln(&truth, &x, &DMatrix::zeros(n, p), &mut rng).unwrap();
    (truth, data)
}

#[test]
fn moment_init_matches_normal_equations() {
    let (_, data) = simulated(60, 3, 3, 1);
    let init = init_moment(&data).unwrap();
    let x = &data.covariates;
    let w = DMatrix::from_fn(data.n(), data.p(), |i, j| (data.y(i, j) + 0.5).ln());
    let xtx = x.transpose() * x;
    let b = xtx.clone().try_inverse().unwrap() * x.transpose() * w;
    assert!((b - &init.params0.b).amax() < 1e-10);
    assert_eq!(init_moment(&data).unwrap().params0, init.params0);
}

#[test]
fn vem_lite_mean_near_conditional_mean_for_one_species() {
    let (truth, data) = simulated(40, 1, 2, 2);
    let init = init_vem_lite(&data, 50).unwrap();
    let mut changed = false;
    for i in 0..data.n() {
        let exact = quadrature_oracle(
            &init.params0,
            &[data.counts[(i, 0)]],
            &data.covariates.row(i).transpose(),
            &[0.0],
        )
        .unwrap();
        assert!((init.site_means[(i, 0)] - exact.mean[0]).abs() < 0.2, "site {i}");
        changed |= init.site_means[(i, 0)] != init_moment(&data).unwrap().site_means[(i, 0)];
    }
    assert!(changed);
    assert!(truth.validate().is_ok());
}

#[test]
fn full_fit_recovers_truth_roughly() {
    let (truth, data) = simulated(300, 2, 2, 3);
    let init = init_vem_lite(&data, 20).unwrap();
    let fit = fit_full(&data, &small_config(3), &init).unwrap();
    let layout = ParamLayout::new(2, 2);
    let est = layout.to_vector(&fit.params);
    let tru = layout.to_vector(&truth);
    for i in 0..layout.dim() {
        assert!((est[i] - tru[i]).abs() < 5.0 * fit.std_errors[i] + 0.05, "coordinate {i}: {} vs {}", est[i], tru[i]);
    }
    assert_eq!(fit.ess_trace.len(), fit.iterations_run);
    assert!(fit.final_ess.median > 0.3);
}

#[test]
fn full_fit_is_deterministic() {
    let (_, data) = simulated(50, 2, 1, 4);
    let init = init_moment(&data).unwrap();
    let a = fit_full(&data, &small_config(9), &init).unwrap();
    let b = fit_full(&data, &small_config(9), &init).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.objective_trace, b.objective_trace);
    let c = fit_full(&data, &small_config(10), &init).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn exact_full_em_increases_likelihood() {
    let (_, data) = simulated(40, 2, 2, 5);
    let init = init_moment(&data).unwrap();
    let trace = fit_full_exact(&data, &init.params0, 30).unwrap();
    for w in trace.log_lik.windows(2) {
        assert!(w[1] >= w[0] - 1e-10);
    }
}

#[test]
fn single_block_reduction_and_dimension() {
    let (_, data) = simulated(80, 3, 2, 6);
    let init = init_vem_lite(&data, 10).unwrap();
    let cfg = small_config(6);
    let full = fit_full(&data, &cfg, &init).unwrap();
    let comp = fit_composite(&data, &cfg, &BlockDesign::single(3), &init).unwrap();
    assert!((&full.params.b - &comp.fit.params.b).amax() < 1e-9);
    assert!((&full.params.sigma - &comp.fit.params.sigma).amax() < 1e-8);
    assert_eq!(comp.godambe.h, comp.godambe.j);
    let score = cl_bic(&comp, vec![true, true], data.covariate_names.clone());
    assert_relative_eq!(score.dim_estimate, 12.0, epsilon = 1e-6);
    assert!(score.dims_agree);
    assert_relative_eq!(comp.cl_value, full.log_likelihood, epsilon = 1e-9);
}

#[test]
fn pairwise_fit_has_consistent_godambe() {
    let (_, data) = simulated(120, 4, 2, 7);
    let init = init_vem_lite(&data, 10).unwrap();
    let mut rng = task_stream(7, 1);
    let design = build_block_design(4, 2, &mut rng, 5).unwrap();
    let comp = fit_composite(&data, &small_config(7), &design, &init).unwrap();
    let g = &comp.godambe;
    assert!((g.dim_hg - g.dim_jh).abs() < 1e-6 * g.dim_hg);
    assert!(comp.fit.std_errors.iter().all(|s| s.is_finite() && *s > 0.0));
    let report = wald_report(&comp.fit, &data.covariate_names, &data.species_names, 0.95).unwrap();
    assert_eq!(report.entries.len(), ParamLayout::new(2, 4).dim());
    for e in &report.entries {
        assert!(e.ci_lower <= e.estimate && e.estimate <= e.ci_upper);
    }
}

#[test]
fn marginal_design_leaves_covariances_unidentified() {
    let (_, data) = simulated(60, 3, 1, 8);
    let init = init_moment(&data).unwrap();
    let comp = fit_composite(&data, &small_config(8), &BlockDesign::marginal(3), &init).unwrap();
    let layout = ParamLayout::new(1, 3);
    assert_eq!(comp.fit.params.sigma[(1, 0)], 0.0);
    assert!(comp.fit.std_errors[layout.sigma_index(1, 0)].is_nan());
    assert!(comp.fit.std_errors[layout.sigma_index(1, 1)].is_finite());
    let report = wald_report(&comp.fit, &data.covariate_names, &data.species_names, 0.95).unwrap();
    assert_eq!(report.entries.len(), 3 + 3);
}

#[test]
fn selection_trivial_cases() {
    let (_, data) = simulated(60, 2, 3, 9);
    let design = BlockDesign::single(2);
    let cfg = FitConfig { n_iter_max: 10, ..small_config(9) };
    let one = select_model(&data, &[vec![true, true, false]], &cfg, &design, 5).unwrap();
    assert_eq!(one.ranked.len(), 1);
    assert_eq!(one.best().unwrap().mask, vec![true, true, false]);
    let twice = select_model(&data, &[vec![true, false, true], vec![true, false, true]], &cfg, &design, 5).unwrap();
    assert_eq!(twice.ranked[0].bic, twice.ranked[1].bic);
    assert!(select_model(&data, &[vec![false, true, true]], &cfg, &design, 5).is_err());
}

#[test]
fn study_is_deterministic_and_order_free() {
    let cfg = StudyConfig {
        n: 30,
        p: 2,
        d: 2,
        methods: vec![Method::Full, Method::Composite(2)],
        replicates: 4,
        fit: FitConfig { n_iter_max: 8, n_particles_initial: 20, particle_growth: ParticleGrowth::Constant, stop_lag: 4, ..FitConfig::default() },
        master_seed: 5,
        init_steps: 3,
        ..StudyConfig::default()
    };
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&a.methods[0].ks).unwrap(), serde_json::to_string(&b.methods[0].ks).unwrap());
    assert_eq!(a.replicate_csv().lines().count(), b.replicate_csv().lines().count());
    for m in &a.methods {
        assert!(m.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!(m.ks.iter().all(|k| (0.0..=1.0).contains(&k.p_value) && (0.0..=1.0).contains(&k.statistic)));
    }
}

#[test]
fn ks_null_calibration() {
    use pln_core::study::ks_test;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = task_stream(21, 0);
    let mut rejections = 0;
    for _ in 0..100 {
        let sample: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
        if ks_test(&sample).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    assert!(rejections <= 15, "{rejections}");
}
