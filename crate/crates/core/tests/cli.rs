//! Runs the command-line binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gibbsvb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gibbsvb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gibbsvb(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// `name -> (mean, sd)` from a coefficients CSV.
fn coefficients(path: &Path) -> Vec<(String, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            )
        })
        .collect()
}

fn simulate_strauss(dir: &Path) -> String {
    let sim = dir.join("sim");
    ok(&[
        "simulate",
        "--process",
        "gibbs",
        "--window",
        "0,1,0,1",
        "--seed",
        "3",
        "--theta",
        "5.3,-1.6",
        "--interaction",
        "strauss:0.05",
        "--out",
        sim.to_str().unwrap(),
    ]);
    sim.join("pattern.csv").to_str().unwrap().to_string()
}

#[test]
fn vb_and_irls_agree_on_a_shared_dummy_file() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = simulate_strauss(dir.path());
    let vb_dir = dir.path().join("vb");
    let irls_dir = dir.path().join("irls");
    let stdout = ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--interaction",
        "strauss:0.05",
        "--fitter",
        "vb",
        "--prior",
        "flat",
        "--out",
        vb_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("interaction0"));
    let dummy = vb_dir.join("dummy.csv");
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--interaction",
        "strauss:0.05",
        "--fitter",
        "irls",
        "--dummy-file",
        dummy.to_str().unwrap(),
        "--out",
        irls_dir.to_str().unwrap(),
    ]);
    let a = coefficients(&vb_dir.join("coefficients.csv"));
    let b = coefficients(&irls_dir.join("coefficients.csv"));
    assert_eq!(a.len(), 2);
    for ((name, m1, _), (_, m2, _)) in a.iter().zip(&b) {
        assert!(((m1 - m2) / m2).abs() < 0.02, "{name}: {m1} vs {m2}");
    }
}

#[test]
fn outputs_carry_a_provenance_preamble() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = simulate_strauss(dir.path());
    let out = dir.path().join("fit");
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--interaction",
        "strauss:0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    for name in ["coefficients.csv", "dummy.csv", "config.txt"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# gibbsvb "), "{name}");
        assert!(
            lines.next().unwrap().starts_with("# config-sha256 "),
            "{name}"
        );
        assert_eq!(lines.next().unwrap(), "# seed 0", "{name}");
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert!(record["elbo"].as_f64().unwrap().is_finite());
}

#[test]
fn config_file_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = simulate_strauss(dir.path());
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--interaction",
        "strauss:0.05",
        "--seed",
        "11",
        "--out",
        first.to_str().unwrap(),
    ]);
    let config = first.join("config.txt");
    ok(&[
        "--config",
        config.to_str().unwrap(),
        "fit",
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read_to_string(first.join("coefficients.csv")).unwrap(),
        fs::read_to_string(second.join("coefficients.csv")).unwrap()
    );
}

#[test]
fn bayes_factor_requires_matching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = simulate_strauss(dir.path());
    let strauss = dir.path().join("strauss");
    let poisson = dir.path().join("poisson");
    let reseeded = dir.path().join("reseeded");
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--interaction",
        "strauss:0.05",
        "--out",
        strauss.to_str().unwrap(),
    ]);
    let dummy = strauss.join("dummy.csv");
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--dummy-file",
        dummy.to_str().unwrap(),
        "--out",
        poisson.to_str().unwrap(),
    ]);
    ok(&[
        "fit",
        "--pattern",
        &pattern,
        "--window",
        "0,1,0,1",
        "--seed",
        "9",
        "--out",
        reseeded.to_str().unwrap(),
    ]);
    let fit1 = strauss.join("fit.json");
    let stdout = ok(&[
        "bayes-factor",
        "--fit1",
        fit1.to_str().unwrap(),
        "--fit0",
        poisson.join("fit.json").to_str().unwrap(),
    ]);
    assert!(!stdout.trim().is_empty());
    let mismatched = gibbsvb(&[
        "bayes-factor",
        "--fit1",
        fit1.to_str().unwrap(),
        "--fit0",
        reseeded.join("fit.json").to_str().unwrap(),
    ]);
    assert_eq!(mismatched.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(gibbsvb(&["fit", "--bogus"]).status.code(), Some(2));
    assert_eq!(gibbsvb(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = gibbsvb(&[
        "fit",
        "--pattern",
        "/nonexistent/pattern.csv",
        "--window",
        "0,1,0,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());
}
