use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gradphi_cli::error::CliError;
use gradphi_cli::plots::emit_plot_data;
use serde_json::Value;

fn gradphi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradphi"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("GRADPHI_BETA")
        .output()
        .expect("binary runs")
}

fn smoke(out: &Path) -> Output {
    gradphi(out, &["--seed", "11", "--set", "sweeps=6000", "pipeline"])
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn even_l_exits_with_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradphi(dir.path(), &["--set", "L=4", "torus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_with_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradphi(dir.path(), &["--set", "colour=red", "torus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gaussian_smoke_run_is_clean_and_fits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = smoke(dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(dir.path());
    let q: Vec<f64> = s["fit"]["q"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let se = s["fit"]["param_se"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .fold(0.0, f64::max);
    assert!(q.iter().all(|v| v.abs() < 4.0 * se), "q = {q:?}, se = {se}");
    assert!(s["identity"]["max_residual"].as_f64().unwrap() <= 1e-12);
    let flow = &s["flow"];
    assert!((flow["q_ab"].as_f64().unwrap() - flow["gaussian"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn manifest_precedes_outputs_and_records_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradphi(dir.path(), &["--seed", "5", "torus"]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["event"], "start");
    assert_eq!(lines[0]["seed"], "5");
    assert_eq!(lines[0]["config_sha256"].as_str().unwrap().len(), 64);
    assert!(lines[0]["versions"]["gradphi"].is_string());
    assert_eq!(lines[1]["event"], "finish");
}

#[test]
fn rerun_reproduces_every_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(smoke(a.path()).status.code(), Some(0));
    assert_eq!(smoke(b.path()).status.code(), Some(0));
    for name in [
        "cov.csv",
        "residuals.csv",
        "flow.csv",
        "identity.csv",
        "plots/decay.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gradphi"))
        .args(["--out", dir.path().to_str().unwrap(), "torus"])
        .env("GRADPHI_N", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let t: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("torus.json")).unwrap()).unwrap();
    assert_eq!(t["side"], 9);
}

#[test]
fn config_file_is_read_and_overridden_by_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small torus\nN = 2\nL = 5\n").unwrap();
    let out = gradphi(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--set", "N=1", "torus"],
    );
    assert_eq!(out.status.code(), Some(0));
    let t: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("torus.json")).unwrap()).unwrap();
    assert_eq!(t["side"], 5);
}

#[test]
fn fit_without_covariance_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradphi(dir.path(), &["gibbs", "fit-q"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_bundles() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(smoke(dir.path()).status.code(), Some(0));
    let flow = fs::read_to_string(dir.path().join("plots/flow.csv")).unwrap();
    assert_eq!(flow.lines().count() - 1, 3);
    let decay = fs::read_to_string(dir.path().join("plots/decay.csv")).unwrap();
    let seps: Vec<f64> = decay
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(!seps.is_empty() && seps.windows(2).all(|w| w[0] <= w[1]));
    let frd = fs::read_to_string(dir.path().join("plots/frd_profiles.csv")).unwrap();
    assert_eq!(frd.lines().count() - 1, 3 * 14);
}

#[test]
fn empty_run_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_plot_data(dir.path()),
        Err(CliError::MissingOutput(_))
    ));
}

#[test]
fn subcommands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cases: &[(&[&str], &str)] = &[
        (&["gff"], "gff_profile.csv"),
        (&["frd", "build"], "frd_layers.csv"),
        (&["frd", "verify"], "frd_coalescence.csv"),
        (&["frd", "report", "--alpha", "1"], "frd_scaling.csv"),
        (
            &["polymers", "--k", "1", "--points", "0,0;4,1"],
            "polymer_ops.jsonl",
        ),
        (
            &["rg", "bound", "--eta", "0.2", "--L", "5", "--jab", "4"],
            "bound.csv",
        ),
        (&["rg", "identity-check"], "identity.csv"),
        (&["--set", "flow.inputs=cubic", "rg", "flow"], "flow.csv"),
    ];
    for (args, file) in cases {
        let out = gradphi(p, args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(p.join(file).exists(), "{file}");
    }
    let bound = fs::read_to_string(p.join("bound.csv")).unwrap();
    assert_eq!(bound.lines().count(), 6);
    assert!(bound
        .lines()
        .nth(3)
        .unwrap()
        .starts_with("2,1.092266666667e-2"));
}
