use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flexgnn::checkpoint::load_checkpoint;

fn flexgnn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexgnn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bound_prints_cora_constant() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgnn(
        &["bound", "--L", "2", "--C", "7", "--d", "1433", "--N", "2708", "--xinf", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let m: f64 = text.trim().strip_prefix("M = ").unwrap().parse().unwrap();
    assert!((m - 2.146_958_159_577_883).abs() < 1e-12, "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bound.json")).unwrap()).unwrap();
    assert_eq!(json["M"].as_f64(), Some(m));
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("VERSION").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgnn(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_flexgnn")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("oversmooth"));
}

#[test]
fn missing_config_writes_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgnn(&["train", "--config", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = fs::read_to_string(dir.path().join("error.json")).unwrap();
    assert!(err.contains("config not found"), "{err}");
}

#[test]
fn bound_without_sizes_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgnn(&["bound", "--L", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("error.json").exists());
}

#[test]
fn output_root_from_environment() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flexgnn"))
        .args(["sbm", "--nodes", "20"])
        .env("FLEXGNN_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(root.path().join("sbm").join("edges.txt").exists());
}

#[test]
fn train_then_report_bound_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"dataset": {"kind": "sbm", "num_nodes": 60, "seed": 5},
            "model": {"hidden": [8]},
            "train": {"epochs": 10},
            "seeds": [3]}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = flexgnn(&["train", "--config", config.to_str().unwrap()], &run);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("seed_3/record.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(!csv.lines().next().unwrap().contains("secs"));

    let ckpt = run.join("seed_3/checkpoint");
    let (params, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(params.num_layers(), 2);

    let report = dir.path().join("bound");
    let o = flexgnn(
        &[
            "bound",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--mc-draws",
            "64",
            "--mc-hypotheses",
            "4",
        ],
        &report,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("bound.json")).unwrap()).unwrap();
    let gen = json["generalization_bound"].as_f64().unwrap();
    let emp = json["empirical_capped_loss"].as_f64().unwrap();
    assert!(gen > emp);
    assert!(json["report"]["mc_estimate"].as_f64().is_some());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgnn(&["gradcheck", "--instances", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn in_process_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for rep in 0..2 {
        let out = dir.path().join(rep.to_string());
        let code = flexgnn::cli::run([
            "flexgnn",
            "grid",
            "--epochs",
            "8",
            "--hidden",
            "8",
            "--seeds",
            "0,1",
            "--rates",
            "0.2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        csvs.push((
            fs::read(out.join("grid_summary.csv")).unwrap(),
            fs::read(out.join("grid_runs.csv")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
}
