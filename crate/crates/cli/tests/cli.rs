use std::path::Path;
use std::process::{Command, Output};

fn laq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn laq")
}

const SMALL: &str = r#"
policies = ["snapkv", "laq", "laq_pp"]
budgets = [8, 16]
synthetic_count = 2

[policy]
pool_kernel = 1
keep_window = false

[synthetic]
t_input = 64
t_response = 8
"#;

#[test]
fn run_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "small.toml", SMALL);
    let out = laq(dir.path(), &["--config", "small.toml", "--out", "res", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/results.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["cells"].as_array().unwrap().len(), 3 * 2 * 2);
    let csv = std::fs::read_to_string(dir.path().join("res/cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "small.toml", SMALL);
    let out = laq(
        dir.path(),
        &["--config", "small.toml", "--policy", "full", "--budget", "64", "--mode", "raw", "--format", "csv", "run"],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains(",full,64,ok,,1,")), "{stdout}");
}

#[test]
fn failed_cell_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "small.toml", SMALL);
    let out = laq(dir.path(), &["--config", "small.toml", "--policy", "streaming,snapkv", "--budget", "3,16", "run"]);
    assert_eq!(out.status.code(), Some(1));
    let csv = std::fs::read_to_string(dir.path().join("out/cells.csv")).unwrap();
    assert!(csv.contains("failed"));
    assert!(csv.contains(",ok,"));
}

#[test]
fn bad_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = laq(dir.path(), &["--trace", "missing.kvtr", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = laq(dir.path(), &["--policy", "nope", "run"]);
    assert!(!out.status.success());
    fs_write(dir.path(), "c.yaml", "x: 1");
    assert_eq!(laq(dir.path(), &["--config", "c.yaml", "run"]).status.code(), Some(2));
}

#[test]
fn generated_traces_replay() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "small.toml", SMALL);
    let out = laq(dir.path(), &["--config", "small.toml", "--out", "traces", "--seed", "5", "gen-trace", "--count", "2"]);
    assert!(out.status.success());
    assert!(dir.path().join("traces/synthetic_5.kvtr").is_file());
    assert!(dir.path().join("traces/synthetic_6.kvtr").is_file());
    let out = laq(
        dir.path(),
        &["--trace", "traces/synthetic_5.kvtr", "--policy", "laq", "--budget", "8", "--steps", "8", "--format", "csv", "run"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn sweep_ablate_export() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "small.toml", SMALL);
    let out = laq(dir.path(), &["--config", "small.toml", "--budget", "8", "--format", "csv", "recall-sweep", "--window", "4"]);
    assert!(out.status.success());
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep_synthetic_0.csv")).unwrap();
    assert!(sweep.starts_with("start,mean_recall,layer_0,layer_1"));
    assert_eq!(sweep.lines().count(), 1 + 64 + 8 - 4 + 1);

    let out = laq(dir.path(), &["--config", "small.toml", "--policy", "laq", "--budget", "8", "--steps", "1,8", "ablate"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("laq B=8 S=1:0.250 S=8:1.000"), "{text}");

    let out = laq(dir.path(), &["--config", "small.toml", "--format", "csv", "export-queries"]);
    assert!(out.status.success());
    let q = std::fs::read_to_string(dir.path().join("out/queries.csv")).unwrap();
    assert!(q.starts_with("layer,head,kind,index,position,v0"));
}

#[test]
fn toy_latency() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(dir.path(), "toy.toml", "prompt_len = 64\n[model]\nvocab = 32\nhead_dim = 8\nmax_pos = 256\n");
    let out = laq(
        dir.path(),
        &["--config", "toy.toml", "--toy", "--policy", "laq_pp", "--budget", "16", "--steps", "2", "--format", "csv", "latency", "--decode", "4"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/latency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("laq_pp,16,2,4,"));
}

fn fs_write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}
