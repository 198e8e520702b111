use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "name": "tiny",
  "dataset": {"kind": "synthetic_1d_hetero", "n": 300},
  "method": "feature_cp",
  "alpha": 0.1,
  "seeds": [3],
  "model": {"hidden_widths": [8, 8], "split_index": 1},
  "train": {"epochs": 2}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feature-cp")).current_dir(dir).args(args).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn staged_pipeline_matches_one_shot_experiment() {
    let dir = setup();
    let p = dir.path();
    for stage in ["train", "calibrate", "evaluate"] {
        let args: &[&str] = if stage == "train" {
            &[stage, "--config", "cfg.json", "--out", "staged"]
        } else {
            &[stage, "--name", "tiny", "--out", "staged"]
        };
        ok(&run(p, args));
    }
    ok(&run(p, &["experiment", "--config", "cfg.json", "--out", "direct"]));
    let staged = fs::read(p.join("staged/tiny/3/result.json")).unwrap();
    let direct = fs::read(p.join("direct/tiny/3/result.json")).unwrap();
    assert_eq!(staged, direct);
    assert!(p.join("staged/tiny/3/calibration.json").exists());
    assert!(p.join("staged/tiny/3/model_0.json").exists());
}

#[test]
fn experiment_is_reproducible_and_writes_summary() {
    let dir = setup();
    let p = dir.path();
    ok(&run(p, &["experiment", "--config", "cfg.json", "--out", "a"]));
    ok(&run(p, &["experiment", "--config", "cfg.json", "--out", "b"]));
    for f in ["tiny/3/result.json", "tiny/result.json", "tiny/summary.csv"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(p.join("a/tiny/summary.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,dataset,seed,alpha,coverage,avg_length,weighted_length,group_coverage,\
         feature_spread,output_spread,chosen_M,tightness_ratio"
    );
}

#[test]
fn flags_override_config_values() {
    let dir = setup();
    let p = dir.path();
    let args = ["experiment", "--config", "cfg.json", "--method", "vanilla_cp", "--alpha", "0.2", "--seeds", "4,5"];
    ok(&run(p, &[&args[..], &["--name", "over"]].concat()));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("runs/over/result.json")).unwrap()).unwrap();
    assert_eq!(doc["method"], "vanilla_cp");
    assert_eq!(doc["alpha"], 0.2);
    assert_eq!(doc["config"]["seeds"], serde_json::json!([4, 5]));
    assert!(p.join("runs/over/5/result.json").exists());
}

#[test]
fn gen_data_and_diagnostics() {
    let dir = setup();
    let p = dir.path();
    ok(&run(p, &["gen-data", "--config", "cfg.json"]));
    let csv = fs::read_to_string(p.join("runs/tiny/data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);
    ok(&run(p, &["train", "--config", "cfg.json", "--untrained-control"]));
    ok(&run(p, &["calibrate", "--name", "tiny"]));
    ok(&run(p, &["diagnostics", "--name", "tiny"]));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("runs/tiny/3/diagnostics.json")).unwrap()).unwrap();
    assert!(doc["cubic"]["feature_spread"].is_number());
}

#[test]
fn sweeps_write_one_run_per_point() {
    let dir = setup();
    let p = dir.path();
    ok(&run(p, &["sweep-alpha", "--config", "cfg.json", "--alphas", "0.1,0.2"]));
    ok(&run(p, &["sweep-split", "--config", "cfg.json", "--splits", "1,2"]));
    for name in ["tiny-alpha-0.1", "tiny-alpha-0.2", "tiny-split-1", "tiny-split-2"] {
        assert!(p.join("runs").join(name).join("summary.csv").exists(), "{name}");
    }
}

#[test]
fn failures_exit_nonzero_with_stage_tags() {
    let dir = setup();
    let p = dir.path();
    let cases: [(&[&str], &str); 5] = [
        (&["experiment", "--config", "cfg.json", "--alpha", "1.5"], "[config]"),
        (&["experiment", "--config", "missing.json"], "[config]"),
        (&["experiment", "--method", "nonsense"], "[config]"),
        (&["evaluate", "--name", "never-trained"], "[load]"),
        (&["sweep-split", "--config", "cfg.json", "--splits", "9"], "[sweep-split]"),
    ];
    for (args, tag) in cases {
        let out = run(p, args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(tag), "{args:?}: {err}");
    }
    let out = run(p, &["experiment", "--dataset", "csv:absent.csv:y", "--seeds", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[data] seed"));
}
