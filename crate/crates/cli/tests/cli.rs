use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use stmpc_cli::scenario::override_key;
use stmpc_cli::ScenarioFile;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn stmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmpc"))
        .args(args)
        .env_remove("STMPC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_variant(dir: &Path, base: &str, key: &str, value: &str) -> PathBuf {
    let text = std::fs::read_to_string(scenario(base)).unwrap();
    let s = override_key(&text, key, value).unwrap();
    let path = dir.join(format!("{key}.toml"));
    std::fs::write(&path, s.to_toml()).unwrap();
    path
}

#[test]
fn bundled_scenarios_round_trip_through_normalization() {
    for name in ["double_integrator_energy.toml", "equilibrium.toml"] {
        let out = stmpc(&["check", scenario(name).to_str().unwrap(), "--dump-normalized"]);
        assert!(out.status.success());
        let dumped = String::from_utf8(out.stdout).unwrap();
        let reparsed = ScenarioFile::parse(&dumped).unwrap();
        let original = ScenarioFile::load(&scenario(name)).unwrap().normalized().unwrap();
        assert_eq!(reparsed, original);
        assert_eq!(reparsed.normalized().unwrap(), reparsed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_dump_reparses_identically(
        p in 0.01..5.0f64, cap in 0.0..3.0f64, horizon in 1usize..40, end in 0.0..100.0f64, x in -1e3..1e3f64,
    ) {
        let text = std::fs::read_to_string(scenario("double_integrator_energy.toml")).unwrap();
        let mut s = ScenarioFile::parse(&text).unwrap();
        s.resource.refill_rate = p;
        s.resource.cap = cap;
        s.resource.initial_level = None;
        s.controller.horizon = horizon;
        s.run.end_time = end;
        s.plant.initial_state = vec![x, -x / 3.0];
        let n = s.normalized().unwrap();
        prop_assert_eq!(ScenarioFile::parse(&n.to_toml()).unwrap(), n);
    }
}

#[test]
fn unknown_keys_are_rejected_with_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("equilibrium.toml")).unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text.replace("horizon = 10", "horizon = 10\nhorizn = 3")).unwrap();
    let out = stmpc(&["check", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizn") && err.contains("line"), "{err}");
}

#[test]
fn check_flags_failed_assumptions() {
    let dir = tempfile::tempdir().unwrap();
    let out = stmpc(&["check", scenario("double_integrator_energy.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("a2 (no free zero-length samples): true"));
    assert!(text.contains("a4 (recovery interval admissible): true"));

    let no_refill = write_variant(dir.path(), "double_integrator_energy.toml", "resource.refill_rate", "0.0");
    let out = stmpc(&["check", no_refill.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("a3 (recovery set nonempty): false"));

    let short = write_variant(dir.path(), "double_integrator_energy.toml", "resource.max_interval", "0.16");
    let out = stmpc(&["check", short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("a4 (recovery interval admissible): false"));
}

#[test]
fn equilibrium_run_writes_logs_with_zero_value() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("eq");
    let out = stmpc(&["run", scenario("equilibrium.toml").to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--plots", "--csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "dense.csv", "analysis.csv", "plots/mu_curve.csv", "plots/average_usage.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let mut reader = csv::Reader::from_path(out_dir.join("trajectory.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["k", "t_k", "dt", "x_1", "x_2", "u_1", "r", "mu", "vstar", "status", "fallback"]);
    let vstar = header.iter().position(|h| h == "vstar").unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let v: f64 = rec.unwrap()[vstar].parse().unwrap();
        assert!(v <= 1e-6);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_stmpc"))
        .args(["run", scenario("equilibrium.toml").to_str().unwrap()])
        .env("STMPC_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("trajectory.csv").exists());
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let target = blocker.join("out");
    let out = stmpc(&["run", scenario("equilibrium.toml").to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_start_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    // Two one-second stages cannot bring (50, 0) to rest with |u| <= 2.
    let text = std::fs::read_to_string(scenario("equilibrium.toml"))
        .unwrap()
        .replace("initial_state = [0.0, 0.0]", "initial_state = [50.0, 0.0]")
        .replace("horizon = 10", "horizon = 2");
    let far = dir.path().join("far.toml");
    std::fs::write(&far, text).unwrap();
    let out = stmpc(&["run", far.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside the feasible set"));
}

#[test]
fn sweep_rows_respect_the_average_bound() {
    let dir = tempfile::tempdir().unwrap();
    let short = write_variant(dir.path(), "double_integrator_energy.toml", "run.end_time", "1.5");
    let out_dir = dir.path().join("sweep");
    let out = stmpc(&[
        "sweep",
        short.to_str().unwrap(),
        "--param",
        "resource.refill_rate",
        "--values",
        "0.3,0.5,0.7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["value", "total_cost", "average_rate", "usage_bound", "samples", "status"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        assert_eq!(&row[5], "ok");
        let avg: f64 = row[2].parse().unwrap();
        let bound: f64 = row[3].parse().unwrap();
        assert!(avg <= bound + 1e-9, "{avg} > {bound}");
    }
    for i in 0..3 {
        assert!(out_dir.join(format!("run_{i}/trajectory.csv")).exists());
    }
}

#[test]
fn sweep_without_values_is_a_usage_error() {
    let path = scenario("equilibrium.toml");
    let out = stmpc(&["sweep", path.to_str().unwrap(), "--param", "resource.refill_rate", "--values", ""]);
    assert_eq!(out.status.code(), Some(1));
    let out = stmpc(&["sweep", path.to_str().unwrap(), "--param", "resource.refill_rate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn override_widens_integers_for_float_keys() {
    let text = std::fs::read_to_string(scenario("equilibrium.toml")).unwrap();
    let s = override_key(&text, "resource.refill_rate", "1").unwrap();
    assert_eq!(s.resource.refill_rate, 1.0);
    let s = override_key(&text, "controller.horizon", "7").unwrap();
    assert_eq!(s.controller.horizon, 7);
    assert!(override_key(&text, "controller.horizon", "[1]").is_err());
    assert!(override_key(&text, "plant.colour", "1").is_err());
}
