use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cereals");

const SMALL: &str = r#"{
  "dataset": {"train_images": 8, "val_images": 3, "height": 32, "width": 32, "num_classes": 3,
              "sites_per_image": 6, "class_weights": [], "feature_channels": 4,
              "edge_vertex_spacing": [0, 3, 0], "seed": 5},
  "seed_images": 2,
  "acquisition": {"strategy": "region_score", "measure": "entropy", "region_size": 8, "batch_images": 1},
  "repetitions": 1,
  "max_rounds": 2,
  "learner": {"builtin": {"max_epochs": 10, "patience": 3}}
}"#;

fn cereals(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.json");
    std::fs::write(&config, SMALL).unwrap();
    (dir, config)
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", text(&out.stdout), text(&out.stderr));
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    assert_ok(&cereals(dir.path(), &["generate", "--config", c, "--out", "d1"]));
    assert_ok(&cereals(dir.path(), &["generate", "--config", c, "--out", "d2"]));
    let a = tree(&dir.path().join("d1"));
    let b = tree(&dir.path().join("d2"));
    assert_eq!(a.len(), 1 + 11 * 3);
    assert_eq!(a, b);
}

#[test]
fn config_errors_exit_with_2() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let out = cereals(dir.path(), &["run", "--config", c, "--out", "r", "--strategy", "greedy"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("greedy"));

    std::fs::write(dir.path().join("bad.json"), r#"{"repetitions": 0}"#).unwrap();
    let out = cereals(dir.path(), &["run", "--config", "bad.json", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("typo.json"), r#"{"repetition": 3}"#).unwrap();
    let out = cereals(dir.path(), &["reference", "--config", "typo.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cereals(dir.path(), &["run", "--config", c, "--out", "r", "--fusion", "g3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[cfg(unix)]
#[test]
fn worker_failure_exits_with_3_and_shows_stderr() {
    use std::os::unix::fs::PermissionsExt;
    let (dir, config) = setup();
    let script = dir.path().join("broken-worker.sh");
    std::fs::write(&script, "#!/bin/sh\necho 'model weights not found' >&2\nexit 1\n").unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let out = cereals(
        dir.path(),
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "r",
            "--worker-cmd",
            script.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("model weights not found"));
}

#[test]
fn run_report_and_plot() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let out = cereals(dir.path(), &["run", "--config", c, "--out", "r", "--plot"]);
    assert_ok(&out);
    assert!(text(&out.stdout).contains("p95"));
    for f in ["config.json", "summary.json", "curve_mean.csv", "curves.svg", "rep_0/curve.csv", "rep_0/acquisitions.jsonl", "rep_0/receipts.jsonl", "rep_0/pool_state.json"] {
        assert!(dir.path().join("r").join(f).exists(), "missing {f}");
    }
    let curve = std::fs::read_to_string(dir.path().join("r/rep_0/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);

    let out = cereals(dir.path(), &["report", "r", "--plot", "all.svg"]);
    assert_ok(&out);
    assert!(text(&out.stdout).contains("region_score"));
    assert!(std::fs::read_to_string(dir.path().join("all.svg")).unwrap().starts_with("<svg"));

    let out = cereals(dir.path(), &["report", "missing"]);
    assert!(!out.status.success());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    assert_ok(&cereals(dir.path(), &["run", "--config", c, "--out", "full", "--max-rounds", "3"]));
    assert_ok(&cereals(dir.path(), &["run", "--config", c, "--out", "part", "--max-rounds", "1"]));
    assert_ok(&cereals(dir.path(), &["run", "--config", c, "--out", "part", "--max-rounds", "3", "--resume"]));
    for f in ["rep_0/curve.csv", "rep_0/acquisitions.jsonl", "rep_0/receipts.jsonl", "curve_mean.csv"] {
        let a = std::fs::read_to_string(dir.path().join("full").join(f)).unwrap();
        let b = std::fs::read_to_string(dir.path().join("part").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs after resume");
    }
}

#[test]
fn external_worker_runs_end_to_end() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let worker = format!("{BIN} worker");
    assert_ok(&cereals(dir.path(), &["generate", "--config", c, "--out", "data"]));
    let out = cereals(
        dir.path(),
        &[
            "run", "--config", c, "--data", "data", "--out", "ext", "--worker-cmd", &worker, "--cost-mode", "external",
            "--fusion", "g2", "--workers", "2",
        ],
    );
    assert_ok(&out);
    let curve = std::fs::read_to_string(dir.path().join("ext/rep_0/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
    assert!(dir.path().join("ext/rep_0/worker/worker-1.stderr.log").exists());

    // the in-process builtin learner and the reference worker agree
    let out = cereals(
        dir.path(),
        &["run", "--config", c, "--data", "data", "--out", "int", "--strategy", "image_score", "--max-rounds", "1"],
    );
    assert_ok(&out);
    let out = cereals(
        dir.path(),
        &[
            "run", "--config", c, "--data", "data", "--out", "ext1", "--strategy", "image_score", "--max-rounds", "1",
            "--worker-cmd", &worker,
        ],
    );
    assert_ok(&out);
    // probabilities cross the wire as f32, so scores agree only approximately
    let regions = |run: &str| -> Vec<serde_json::Value> {
        std::fs::read_to_string(dir.path().join(run).join("rep_0/acquisitions.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["regions"].clone())
            .collect()
    };
    assert_eq!(regions("int"), regions("ext1"));
    let curve = |run: &str| std::fs::read_to_string(dir.path().join(run).join("rep_0/curve.csv")).unwrap();
    assert_eq!(curve("int"), curve("ext1"));
}
