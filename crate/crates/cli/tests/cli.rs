use std::path::Path;
use std::process::{Command, Output};

fn superenv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superenv")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_exits_with_config_status_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "run.experiment = validate\nmodel.bogus = 3\n");
    let out = superenv(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.bogus"));
}

#[test]
fn non_integral_horizon_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "run.experiment = simulate\nmodel.n = 3\nmodel.horizon = 1/4\n");
    let out = superenv(&["check", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_prints_resolved_config_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.cfg", "run.experiment = validate\n");
    let out = superenv(&["check", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("moments.order = 2"));
    assert!(text.contains("# hash "));
}

#[test]
fn seed_command_matches_library_derivation() {
    let out = superenv(&["seed", "42", "replica", "7"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "4660228018842329058");
}

#[test]
fn simulate_run_writes_artifacts_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sim.cfg", "run.experiment = simulate\nmodel.n = 8\nrun.replicas = 2\n");
    let out_dir = dir.path().join("out");
    let out = superenv(&["run", &cfg, "--set", "run.seed=9", "--output", &out_dir.to_string_lossy()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    for f in ["config.txt", "metadata.json", "report.json", "mass.csv", "trajectory_0000.csv", "trajectory_0001.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["schema"], 1);
    assert_eq!(meta["seed"], 9);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn particle_cap_exceeded_exits_with_budget_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cap.cfg",
        "run.experiment = simulate\nmodel.n = 100\nmodel.particle_cap = 20\nkernel.kappa = const\nkernel.kappa_value = 50\n",
    );
    let out = superenv(&["run", &cfg, "--output", &dir.path().join("out").to_string_lossy()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
