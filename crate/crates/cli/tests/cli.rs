use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
layers = 2
hidden = 32
heads = 4
ffn = 64
seq = 8
vocab = 32

[parallel]
microbatches = 2

[check]
n_samples = 3
"#;

fn difftrace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difftrace"))
        .args(args)
        .env("DIFFTRACE_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(dir: &Path, f: &str) -> String {
    dir.join(f).to_string_lossy().into_owned()
}

/// simulate both roles and estimate tolerances under `dir`.
fn prepare(dir: &Path, config: &str, extra: &[&str]) {
    for args in [
        vec!["simulate", "--config", config, "--role", "ref"],
        vec!["simulate", "--config", config, "--role", "cand"],
        vec!["estimate-tol", "--config", config],
    ] {
        let o = difftrace(dir, &[&args[..], extra].concat());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
}

fn check(dir: &Path, extra: &[&str]) -> Output {
    let (r, c, t) = (path(dir, "reference.trace"), path(dir, "candidate.trace"), path(dir, "tolerance.json"));
    difftrace(dir, &[&["check", "--ref", &r, "--cand", &c, "--tol", &t], extra].concat())
}

#[test]
fn bugs_list_prints_the_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let o = difftrace(dir.path(), &["bugs", "list"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 9);
    for tag in ["WD", "WC", "MC"] {
        assert_eq!(out.lines().filter(|l| l.split_whitespace().nth(1) == Some(tag)).count(), 3, "{out}");
    }
}

#[test]
fn single_device_pipeline_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    prepare(dir.path(), &cfg, &[]);
    let o = check(dir.path(), &["--text"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("no tensor flagged"));
}

#[test]
fn outputs_land_in_the_env_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let o = difftrace(dir.path(), &["simulate", "--config", &cfg, "--role", "ref", "--out", "nested/ref.trace"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("nested/ref.trace").is_file());
}

#[test]
fn injected_bug_fails_the_check_with_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "[[bugs]]\nid = \"WD_WRONG_SCALE\"\n");
    // Bugs stay inert without tensor parallelism; override the layout.
    let text = std::fs::read_to_string(&cfg).unwrap().replace("microbatches = 2", "microbatches = 2\ntp = 2");
    std::fs::write(&cfg, text).unwrap();
    prepare(dir.path(), &cfg, &["--rewrite-inputs"]);
    let o = check(dir.path(), &["--json", "--out", "report.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["earliest_flagged"], "iter=0|mb=0|kind=ActivationOut|mod=model.embedding");
    assert_eq!(report["exit_code"], 2);
}

#[test]
fn missing_gradient_sync_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "[[bugs]]\nid = \"MC_DP_GRAD\"\n");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("microbatches = 2", "microbatches = 2\ndp = 2");
    std::fs::write(&cfg, text).unwrap();
    prepare(dir.path(), &cfg, &[]);
    assert_eq!(code(&check(dir.path(), &[])), 3);
}

#[test]
fn malformed_inputs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    prepare(dir.path(), &cfg, &[]);

    let trace = dir.path().join("candidate.trace");
    let mut bytes = std::fs::read(&trace).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&trace, bytes).unwrap();
    let o = check(dir.path(), &[]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));

    std::fs::write(dir.path().join("tolerance.json"), "{ not json").unwrap();
    std::fs::copy(dir.path().join("reference.trace"), &trace).unwrap();
    assert_eq!(code(&check(dir.path(), &[])), 4);

    let bad = write_config(dir.path(), "bad.toml", "[[bugs]]\nid = \"NO_SUCH_BUG\"\n");
    let o = difftrace(dir.path(), &["simulate", "--config", &bad, "--role", "ref"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("NO_SUCH_BUG") && stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn traces_from_different_models_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    prepare(dir.path(), &cfg, &[]);
    let other = write_config(dir.path(), "other.toml", "");
    let text = std::fs::read_to_string(&other).unwrap().replace("layers = 2", "layers = 4");
    std::fs::write(&other, text).unwrap();
    let o = difftrace(dir.path(), &["simulate", "--config", &other, "--role", "cand"]);
    assert_eq!(code(&o), 0);
    let o = check(dir.path(), &[]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("digests differ"), "{}", stderr(&o));
}

#[test]
fn sweep_over_data_and_tensor_parallel_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let o = difftrace(dir.path(), &["sweep", &cfg, "--grid", "dp=1,2;tp=1,2;pp=1;vp=1;cp=1;sp=off", "--bugs", "none"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("dp")).count(), 4, "{out}");
    assert!(out.contains("4 runs, 0 unexpected"), "{out}");
}

#[test]
fn sweep_with_bugs_flags_every_bug_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let o = difftrace(
        dir.path(),
        &["sweep", &cfg, "--grid", "dp=1,2;tp=1,2;pp=1;vp=1;cp=1,2;sp=on", "--bugs", "all", "--json", "--out", "sweep.json"],
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    let runs: Vec<&serde_json::Value> = v["rows"].as_array().unwrap().iter().flat_map(|r| r["runs"].as_array().unwrap()).collect();
    let bug_runs = runs.iter().filter(|r| !r["bug"].is_null()).count();
    assert!(bug_runs >= 8, "{bug_runs}");
}

#[test]
fn sweep_rejects_bad_grids_and_bug_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    assert_ne!(code(&difftrace(dir.path(), &["sweep", &cfg, "--grid", "zz=1"])), 0);
    assert_ne!(code(&difftrace(dir.path(), &["sweep", &cfg, "--bugs", "NOPE"])), 0);
}
