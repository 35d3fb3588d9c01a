use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn slide(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slide"));
    cmd.args(args).env_remove("SLIDE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const EXAMPLE: &str = r#"{
  "kind": "second_order_example",
  "system": {"a1": 1.0, "a2": 1.0, "alpha": 2.0, "sigma0": 0.3, "x0": [0.3, 0.2]},
  "numerics": {"dt": 1e-3, "t_end": 2.0},
  "mc": {"n_paths": 400, "master_seed": 5, "t_grid": [0.5, 1.0]},
  "certify": {"n_samples": 4096}
}"#;

const REVERSED: &str = r#"{
  "kind": "finite_dim",
  "system": {"params": {"a": 1.0}, "alpha": 2.0,
    "f1": ["-x2", "a*x2 - alpha"], "f2": ["-x2", "a*x2 + alpha"],
    "g": "a*x1 + x2", "sigma": [[0], [0.3]], "x0": [0.3, 0.2]},
  "certify": {"n_samples": 4096}
}"#;

const SIGN_DRIFT: &str = r#"{
  "kind": "finite_dim",
  "system": {"alpha": 1.0, "f1": ["1"], "f2": ["-1"], "g": "x1", "sigma": [[0.5]], "x0": [0.5]},
  "numerics": {"dt": 1e-4, "t_end": 1.0},
  "mc": {"n_paths": 2000, "master_seed": 3, "t_grid": [1.0]},
  "certify": {"n_samples": 1024}
}"#;

#[test]
fn certify_example_passes_and_reversed_fails_only_under_strict() {
    let dir = TempDir::new().unwrap();
    let ok = config(&dir, "ok.json", EXAMPLE);
    let bad = config(&dir, "bad.json", REVERSED);
    let out = dir.path().join("o");
    assert_eq!(code(&slide(&["certify", s(&ok), "--out", s(&out)], &[])), 0);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("passed = true"));

    let strict = slide(&["certify", s(&bad), "--strict", "--out", s(&out)], &[]);
    assert_eq!(code(&strict), 1);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("violations.upper-margin"));
    assert!(report.contains("violation = "));
    assert_eq!(code(&slide(&["certify", s(&bad), "--out", s(&out)], &[])), 0);
}

#[test]
fn verify_bound_is_deterministic_and_auditable() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", EXAMPLE);
    let out = dir.path().join("o");
    let strip = |p: &Path| {
        let r = fs::read_to_string(p.join("report.txt")).unwrap();
        r[..r.find("[timing]").unwrap()].to_string()
    };
    assert_eq!(
        code(&slide(
            &["verify-bound", s(&cfg), "--out", s(&out), "--threads", "1"],
            &[]
        )),
        0
    );
    let csv = fs::read(out.join("tail_bound.csv")).unwrap();
    let report = strip(&out);
    assert_eq!(
        code(&slide(
            &["verify-bound", s(&cfg), "--out", s(&out)],
            &[("SLIDE_THREADS", "3")]
        )),
        0
    );
    assert_eq!(csv, fs::read(out.join("tail_bound.csv")).unwrap());
    assert_eq!(report, strip(&out));
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("t,p_hat,ci_upper,bound,pass\n0.5,"));
    assert!(!text.contains('\r'));
    for key in ["band = ", "coupling_rule_holds = ", "c1 = 0.5", "master_seed = 5"] {
        assert!(report.contains(key), "{key}");
    }
    // a different seed changes the sample
    let c = dir.path().join("c");
    slide(&["verify-bound", s(&cfg), "--out", s(&c), "--seed", "6"], &[]);
    assert!(fs::read_to_string(c.join("report.txt"))
        .unwrap()
        .contains("master_seed = 6"));
}

#[test]
fn verify_bound_needs_certification_or_override() {
    let dir = TempDir::new().unwrap();
    let body = REVERSED.replace(
        "\"certify\"",
        "\"mc\": {\"n_paths\": 50}, \"numerics\": {\"t_end\": 1.0}, \"certify\"",
    );
    let cfg = config(&dir, "r.json", &body);
    let out = dir.path().join("o");
    assert_eq!(code(&slide(&["verify-bound", s(&cfg), "--out", s(&out)], &[])), 1);
    assert!(!out.join("tail_bound.csv").exists());
    // the reversed system moves away from the surface, so the bound fails
    assert_eq!(
        code(&slide(
            &["verify-bound", s(&cfg), "--override", "--out", s(&out)],
            &[]
        )),
        1
    );
    assert!(out.join("tail_bound.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let t0 = config(&dir, "t0.json", &EXAMPLE.replace("[0.5, 1.0]", "[0.0, 1.0]"));
    let o = slide(&["verify-bound", s(&t0)], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mc.t_grid"));

    let broken = config(
        &dir,
        "broken.json",
        "{\n  \"kind\": \"finite_dim\",\n  \"mc\": {\"n_paths\": }\n}",
    );
    let o = slide(&["certify", s(&broken)], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let cfg = config(&dir, "c.json", EXAMPLE);
    assert_eq!(
        code(&slide(&["certify", s(&cfg)], &[("SLIDE_THREADS", "zero")])),
        2
    );
    assert_eq!(
        code(&slide(&["sweep", s(&cfg), "--axis", "eps", "--values", ""], &[])),
        2
    );
    assert_eq!(
        code(&slide(
            &["sweep", s(&cfg), "--axis", "n_modes", "--values", "8"],
            &[]
        )),
        2
    );
    assert_eq!(code(&slide(&["spde", s(&cfg)], &[])), 2);
    assert_eq!(code(&slide(&["frobnicate"], &[])), 2);
}

#[test]
fn single_value_sweep_matches_verify_bound() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", EXAMPLE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&slide(&["verify-bound", s(&cfg), "--out", s(&a)], &[])), 0);
    assert_eq!(
        code(&slide(
            &[
                "sweep",
                s(&cfg),
                "--axis",
                "eps",
                "--values",
                "0.02",
                "--out",
                s(&b)
            ],
            &[]
        )),
        0
    );
    assert_eq!(
        fs::read(a.join("tail_bound.csv")).unwrap(),
        fs::read(b.join("tail_bound_0.csv")).unwrap()
    );
}

#[test]
fn eps_sweep_strong_error_decreases() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", SIGN_DRIFT);
    let out = dir.path().join("o");
    let o = slide(
        &[
            "sweep",
            s(&cfg),
            "--axis",
            "eps",
            "--values",
            "0.2,0.1,0.05,0.025",
            "--out",
            s(&out),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let errors: Vec<f64> = table
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(errors.len(), 3);
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn simulate_and_spde_write_series() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        "c.json",
        &EXAMPLE.replace("\"certify\"", "\"output\": {\"trajectories\": 2}, \"certify\""),
    );
    let out = dir.path().join("o");
    assert_eq!(code(&slide(&["simulate", s(&cfg), "--out", s(&out)], &[])), 0);
    let tr = fs::read_to_string(out.join("trajectory_1.csv")).unwrap();
    assert!(tr.starts_with("t,x1,x2,g\n0,0.3,0.2,0.5\n"));
    assert_eq!(tr.lines().count(), 2 + 2000);

    let heat = config(
        &dir,
        "h.json",
        r#"{"kind": "spde_heat",
            "system": {"alpha": 1, "f1": "0", "f2": "0", "g": "x1", "b": "0", "x0": [1]},
            "numerics": {"dt": 1e-3, "t_end": 1.0, "n_modes": 32, "n_grid": 128}}"#,
    );
    assert_eq!(code(&slide(&["spde", s(&heat), "--out", s(&out)], &[])), 0);
    let series = fs::read_to_string(out.join("spde_energy.csv")).unwrap();
    let last = series.lines().last().unwrap();
    let norm: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!((norm - (-1.0f64).exp()).abs() <= 5e-3, "{norm}");
    assert!(fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("regularity_convergent = true"));
}
