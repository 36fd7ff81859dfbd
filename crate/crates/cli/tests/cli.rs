use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fastslow");

const OU: &str = r#"
output_dir = "out"

[model]
benchmark = "ou"

[scales]
epsilon = [0.05, 0.02]
kappa = 0.25
m = 1.0

[run]
t = 1.0
h = 0.02
n = 1000
seed = 11

[event]
component = 0
threshold = 1.0
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn fastslow(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_ou_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OU);
    let o = fastslow(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out/validate");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("validation.json")).unwrap()).unwrap();
    assert!(report["violations"].as_array().unwrap().is_empty());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &OU.replace("[run]", "[run]\nwobble = 3"));
    let o = fastslow(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wobble"), "{}", stderr(&o));
}

#[test]
fn bad_scale_relation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &OU.replace("kappa = 0.25", "kappa = 0.6"));
    let o = fastslow(&["rate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kappa"));
}

#[test]
fn numerical_failure_exits_3_with_module_message() {
    let dir = tempfile::tempdir().unwrap();
    // grid far too narrow for the OU density
    let text = format!("{OU}\n[grids]\nz_box = [-0.5, 0.5]\nz_nodes = 41\n");
    let cfg = write_config(dir.path(), &text);
    let o = fastslow(&["density", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("widen the grid"), "{}", stderr(&o));
}

#[test]
fn mdp_check_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OU);
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let o = fastslow(&["--workers", workers, "mdp-check", cfg]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = dir.path().join("out/mdp-check");
        let files: Vec<Vec<u8>> =
            ["mc.csv", "rate.csv", "compare.csv"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn compare_checks_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OU);
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(fastslow(&["rate", cfg_s]).status.code(), Some(0));
    assert_eq!(fastslow(&["mdp-check", cfg_s]).status.code(), Some(0));
    let rate = dir.path().join("out/rate/rate.csv");
    let mc = dir.path().join("out/mdp-check/mc.csv");
    let joined = dir.path().join("out/joined.csv");

    let o = fastslow(&["compare", rate.to_str().unwrap(), mc.to_str().unwrap(), "--out", joined.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&joined).unwrap();
    assert!(text.starts_with("epsilon,scaled_log,prediction,gap,censored"));
    assert_eq!(text.lines().count(), 3);

    // a run of a different config must be refused
    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    let cfg2 = write_config(&other, &OU.replace("seed = 11", "seed = 12"));
    assert_eq!(fastslow(&["mdp-check", cfg2.to_str().unwrap()]).status.code(), Some(0));
    let mc2 = other.join("out/mdp-check/mc.csv");
    let o = fastslow(&["compare", rate.to_str().unwrap(), mc2.to_str().unwrap(), "--out", joined.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest mismatch"));

    // so must a file edited after the run
    let mut bytes = std::fs::read(&mc).unwrap();
    bytes.extend_from_slice(b"\n");
    std::fs::write(&mc, bytes).unwrap();
    let o = fastslow(&["compare", rate.to_str().unwrap(), mc.to_str().unwrap(), "--out", joined.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest mismatch"));
}
