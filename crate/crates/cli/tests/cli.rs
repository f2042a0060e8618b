use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const COMPACT: &str = r#"
[model]
d_model = 8
d_memory = 8
hidden_dim = 8
d_ff = 8
n_heads = 2
e_layers = 1
patch_len = 8
stride = 4
moving_avg = 5
router_hidden = 8
vae_hidden = 8
vae_latent = 4
"#;

fn config(dir: &Path, task: &str, body: &str) -> PathBuf {
    config_with(dir, task, "", body)
}

fn config_with(dir: &Path, task: &str, data: &str, body: &str) -> PathBuf {
    let text = format!(
        "task = \"{task}\"\nseed = 3\n\n[data]\nseq_len = 32\npred_len = 16\ntrain_stride = 16\n\
         eval_stride = 16\n{data}\n\n[train]\nepochs = 1\n{COMPACT}\n{body}"
    );
    let path = dir.join(format!("{task}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

const SINE: &str = r#"
[data.synthetic]
rows = 240
[data.synthetic.signal]
kind = "sine"
period = 16.0
amplitude = 1.0
"#;

fn tsagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsagent")).args(args).env_remove("TSAGENT_VLM_ENDPOINT").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn validate_config_accepts_and_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    let good = config(tmp.path(), "forecast", SINE);
    assert_eq!(tsagent(&["validate-config", "--config", s(&good)]).status.code(), Some(0));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nd_modle = 4\n").unwrap();
    let out = tsagent(&["validate-config", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_modle"));
}

#[test]
fn forecast_run_writes_metrics_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "forecast", SINE);
    let out_dir = tmp.path().join("out");
    let out = tsagent(&["run", "--config", s(&cfg), "--offline", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = metrics(&out_dir);
    assert!(m["rows"][0]["metrics"]["mse"].is_f64());
    assert!(m["rows"][0]["metrics"]["mae"].is_f64());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let plots = report["artifacts"]["plots"].as_array().unwrap();
    assert_eq!(plots.len(), 1);
    assert!(Path::new(plots[0].as_str().unwrap()).is_file());
}

#[test]
fn fixed_seed_offline_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "forecast", SINE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "2")] {
        let out = tsagent(&["train", "--config", s(&cfg), "--offline", "--seed", "11", "--workers", workers, "--out", s(dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(a.join("metrics.json")).unwrap(), std::fs::read(b.join("metrics.json")).unwrap());
}

#[test]
fn missing_checkpoint_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "forecast", SINE);
    let absent = tmp.path().join("absent.tsag");
    let out = tsagent(&["run", "--config", s(&cfg), "--offline", "--checkpoint", s(&absent)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), "forecast", "path = \"absent.csv\"", "");
    let out = tsagent(&["run", "--config", s(&cfg), "--offline", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreachable_endpoint_exits_four_unless_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let body = format!(
        "{SINE}\n[anchors]\nsource = \"vlm\"\n\n[vlm]\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\n\
         max_retries = 0\nbackoff_ms = 1\ntimeout_secs = 2.0\n"
    );
    let cfg = config(tmp.path(), "forecast", &body);
    let out = tsagent(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("vlm"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tsagent(&["run", "--config", s(&cfg), "--offline", "--out", s(&tmp.path().join("off"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn strategy_sweep_gives_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "forecast", SINE);
    let dir = tmp.path().join("ablate");
    let out = tsagent(&[
        "ablate",
        "--config",
        s(&cfg),
        "--offline",
        "--out",
        s(&dir),
        "--flag",
        "completion_strategy=ode|linear|quadratic|repeat",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metrics(&dir)["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn detect_reports_point_adjusted_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"
[data.synthetic]
rows = 480
spike_spacing = 40
[data.synthetic.signal]
kind = "spike_anomaly"
period = 12.0
amplitude = 1.0
positions = []
magnitude = 5.0
"#;
    let cfg = config(tmp.path(), "detect", body);
    let dir = tmp.path().join("detect");
    let out = tsagent(&["run", "--config", s(&cfg), "--offline", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = &metrics(&dir)["rows"][0]["metrics"]["anomaly"];
    for key in ["precision", "recall", "f1"] {
        assert!(a[key].is_f64(), "{key}");
    }
    assert_eq!(a["point_adjust"], Value::Bool(true));
}

#[test]
fn oracle_anchor_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "forecast", SINE);
    let dir = tmp.path().join("anchors");
    let out = tsagent(&["oracle-anchors", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("anchors.json")).unwrap()).unwrap();
    assert!(!v.as_array().unwrap().is_empty());
}
