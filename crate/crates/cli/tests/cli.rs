use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pln"))
        .args(args)
        .env_remove("PLN_SEED")
        .output()
        .expect("run pln")
}

fn write_params(dir: &Path) -> String {
    let path = dir.join("params.json");
    fs::write(
        &path,
        r#"{"b": [[0.8, 0.3, -0.2], [0.4, 0.0, -0.3]], "sigma": [[0.5, 0.2, 0.0], [0.2, 0.6, 0.1], [0.0, 0.1, 0.4]]}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const FAST: [&str; 10] = ["--particles", "30", "--growth", "constant", "--max-iter", "25", "--lag", "5", "--init-steps", "5"];

fn simulate_into(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let params = write_params(dir);
    let out = dir.join(format!("sim{seed}"));
    let o = pln(&["simulate", "--params", &params, "--n", n, "--seed", seed, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn blocks_pairs_and_bounds() {
    let o = pln(&["blocks", "--p", "30", "--k", "2"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("C = 435 blocks (lower bound 435"), "{text}");

    let o = pln(&["blocks", "--p", "10", "--k", "5"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("lower bound 5,"), "{text}");
}

#[test]
fn blocks_rejects_k_above_p() {
    let o = pln(&["blocks", "--p", "4", "--k", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blocks_file_round_trips_into_fit() {
    let dir = tempfile::tempdir().unwrap();
    let blocks = dir.path().join("b.txt");
    let o = pln(&["blocks", "--p", "3", "--k", "2", "--out", blocks.to_str().unwrap()]);
    assert!(o.status.success());
    let sim = simulate_into(dir.path(), "60", "3");
    let out = dir.path().join("fit");
    let mut args = vec![
        "fit",
        "--counts",
        sim.join("counts.csv").to_str().unwrap().to_string().leak(),
        "--covariates",
        sim.join("covariates.csv").to_str().unwrap().to_string().leak(),
        "--likelihood",
        "composite",
        "--blocks",
        blocks.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&FAST);
    let o = pln(&args);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("blocks.txt")).unwrap(), fs::read_to_string(&blocks).unwrap());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_into(dir.path(), "20", "7");
    let params = write_params(dir.path());
    let b = dir.path().join("again");
    let o = pln(&["simulate", "--params", &params, "--n", "20", "--seed", "7", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["counts.csv", "latent.csv", "covariates.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let header = fs::read_to_string(a.join("counts.csv")).unwrap();
    assert!(header.starts_with("sp1,sp2,sp3\n"));
}

#[test]
fn seed_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let a = simulate_into(dir.path(), "15", "99");
    let b = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_pln"))
        .args(["simulate", "--params", &params, "--n", "15", "--seed", "1", "--out", b.to_str().unwrap()])
        .env("PLN_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("counts.csv")).unwrap(), fs::read(b.join("counts.csv")).unwrap());
}

#[test]
fn missing_params_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = pln(&["simulate", "--params", "/nonexistent/params.json", "--n", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("params.json"));
}

#[test]
fn malformed_counts_report_location() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (body, needle) in [
        ("a,b\n1,2\n3\n", "line 3"),
        ("a,b\n1,2\n3,-4\n", "negative count"),
        ("a,b\n1,NaN\n", "column 2"),
        ("a,b\n1,2.5\n", "line 2"),
    ] {
        let counts = dir.path().join("counts.csv");
        fs::write(&counts, body).unwrap();
        let o = pln(&["fit", "--counts", counts.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{body}: {err}");
    }
}

#[test]
fn composite_without_design_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_into(dir.path(), "10", "2");
    let o = pln(&[
        "fit",
        "--counts",
        sim.join("counts.csv").to_str().unwrap(),
        "--likelihood",
        "composite",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_into(dir.path(), "80", "5");
    let out = dir.path().join("fit");
    let counts = sim.join("counts.csv");
    let cov = sim.join("covariates.csv");
    let mut args = vec![
        "fit",
        "--counts",
        counts.to_str().unwrap(),
        "--covariates",
        cov.to_str().unwrap(),
        "--likelihood",
        "composite",
        "--block-size",
        "2",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&FAST);
    let o = pln(&args);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", String::from_utf8_lossy(&o.stderr));
    let est = json(&out.join("estimates.json"));
    assert_eq!(est["schema_version"], 1);
    assert_eq!(est["b"].as_array().unwrap().len(), 2);
    assert_eq!(est["covariates"][0], "intercept");
    assert!(est["effective_dimension"].as_f64().unwrap() > 0.0);
    for e in est["tests"]["entries"].as_array().unwrap() {
        let (lo, hi, x) = (e["ci_lower"].as_f64().unwrap(), e["ci_upper"].as_f64().unwrap(), e["estimate"].as_f64().unwrap());
        assert!(lo <= x && x <= hi);
        assert!(e["p_bh"].as_f64().unwrap() <= e["p_bonferroni"].as_f64().unwrap() + 1e-15);
    }
    let diag = json(&out.join("diagnostics.json"));
    assert_eq!(diag["ess_trace"].as_array().unwrap().len(), diag["iterations"].as_u64().unwrap() as usize);
    let sig = fs::read_to_string(out.join("significance.csv")).unwrap();
    assert!(sig.starts_with("term,sp1,sp2,sp3\nintercept,"));
    assert!(out.join("blocks.txt").exists());
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "fit");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn max_iter_without_convergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_into(dir.path(), "30", "6");
    let out = dir.path().join("fit");
    let o = pln(&[
        "fit",
        "--counts",
        sim.join("counts.csv").to_str().unwrap(),
        "--covariates",
        sim.join("covariates.csv").to_str().unwrap(),
        "--particles",
        "20",
        "--max-iter",
        "3",
        "--lag",
        "50",
        "--init-steps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("estimates.json").exists());
}

#[test]
fn full_and_single_block_composite_agree() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_into(dir.path(), "60", "8");
    let mut results = Vec::new();
    for (lik, extra) in [("full", None), ("composite", Some("3"))] {
        let out = dir.path().join(lik);
        let mut args = vec![
            "fit",
            "--counts",
            sim.join("counts.csv").to_str().unwrap().to_string().leak(),
            "--covariates",
            sim.join("covariates.csv").to_str().unwrap().to_string().leak(),
            "--likelihood",
            lik,
            "--out",
            out.to_str().unwrap().to_string().leak(),
        ];
        if let Some(k) = extra {
            args.extend_from_slice(&["--block-size", k]);
        }
        args.extend_from_slice(&FAST);
        let o = pln(&args);
        assert!(matches!(o.status.code(), Some(0) | Some(3)));
        results.push(json(&out.join("estimates.json")));
    }
    for key in ["b", "sigma"] {
        let (a, b) = (&results[0][key], &results[1][key]);
        for (ra, rb) in a.as_array().unwrap().iter().zip(b.as_array().unwrap()) {
            for (x, y) in ra.as_array().unwrap().iter().zip(rb.as_array().unwrap()) {
                assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-8, "{key}");
            }
        }
    }
}

#[test]
fn select_all_subsets_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    fs::write(&params, r#"{"b": [[0.5, 0.2], [0.4, -0.3], [0.0, 0.1]], "sigma": [[0.4, 0.1], [0.1, 0.5]]}"#).unwrap();
    let sim = dir.path().join("sim");
    let o = pln(&["simulate", "--params", params.to_str().unwrap(), "--n", "60", "--out", sim.to_str().unwrap()]);
    assert!(o.status.success());
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut args = vec![
            "select",
            "--counts",
            sim.join("counts.csv").to_str().unwrap().to_string().leak(),
            "--covariates",
            sim.join("covariates.csv").to_str().unwrap().to_string().leak(),
            "--all-subsets",
            "--out",
            out.to_str().unwrap().to_string().leak(),
        ];
        args.extend_from_slice(&FAST);
        let o = pln(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tables.push(fs::read_to_string(out.join("bic.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0].lines().count(), 5);
}

#[test]
fn select_named_sets() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_into(dir.path(), "40", "4");
    let out = dir.path().join("sel");
    let mut args = vec![
        "select",
        "--counts",
        sim.join("counts.csv").to_str().unwrap().to_string().leak(),
        "--covariates",
        sim.join("covariates.csv").to_str().unwrap().to_string().leak(),
        "--covariate-sets",
        "x1",
        "--out",
        out.to_str().unwrap().to_string().leak(),
    ];
    args.extend_from_slice(&FAST);
    let o = pln(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("bic.json"));
    assert_eq!(doc["selection"]["ranked"].as_array().unwrap().len(), 1);

    args[6] = "nosuch";
    let o = pln(&args);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simstudy_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(
        &cfg,
        r#"{"n": 40, "p": 2, "d": 2, "methods": [{"kind": "full"}, {"kind": "composite", "k": 2}], "replicates": 4,
            "fit": {"n_iter_max": 10, "n_particles_initial": 20, "particle_growth": "constant", "stop_lag": 5},
            "master_seed": 3, "init_steps": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = pln(&["simstudy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("study.json"));
    let methods = doc["report"]["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    for m in methods {
        for p in m["ks"].as_array().unwrap() {
            let v = p["p_value"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let csv = fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}
