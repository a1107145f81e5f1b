use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data.source]
kind = "blobs"
n = 240
classes = 3
dim = 2
label_noise = 0.1

[model]
hidden_blocks = 2
width = 8

[train]
epochs = 8
lr_schedule = [[0, 0.05], [6, 0.005]]
batch_size = 32

[sampling]
k = 3

[search]
population = 3
steps = 2
hidden = 4
estimator_steps = 5

[baselines]
random_samples = 3
"#;

fn pcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcs")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = pcs(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nsed = 2\n").unwrap();
    let o = pcs(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sed"), "{}", stderr(&o));
}

#[test]
fn search_before_train_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcs(&["search", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing checkpoint manifest"), "{}", stderr(&o));
}

#[test]
fn staged_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = pcs(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    };
    ok(&["train", "--config", &cfg, "--run-dir", run_s]);
    assert!(run.join("checkpoints/manifest").exists());
    assert!(run.join("train_log.json").exists());

    ok(&["report", "--run-dir", run_s]);
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert_eq!(report.lines().count(), 2, "{report}");
    assert!(report.contains("final_epoch"));

    // Later stages pick the configuration up from the run directory.
    ok(&["search", "--run-dir", run_s]);
    for b in ["early-stop", "random", "loss-search"] {
        ok(&["baseline", b, "--run-dir", run_s]);
    }
    ok(&["probe-blocks", "--run-dir", run_s]);
    ok(&["evaluate", "--run-dir", run_s]);
    ok(&["evaluate", "--pc", "[0, 1, 2]", "--name", "manual", "--run-dir", run_s]);
    for f in ["history.json", "best_pc.json", "selection_params.csv", "probe/block_0.csv", "probe/pc_histogram.csv", "reliability/pcs_test_pre.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }

    ok(&["report", "--run-dir", run_s]);
    let first = std::fs::read(run.join("report.json")).unwrap();
    ok(&["report", "--run-dir", run_s]);
    assert_eq!(first, std::fs::read(run.join("report.json")).unwrap());
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    for m in ["early_stop_ece", "early_stop_error", "early_stop_loss", "evaluate", "final_epoch", "loss_search", "manual", "pcs", "random_search"] {
        assert!(report.contains(m), "{m} missing from\n{report}");
    }
}

#[test]
fn bad_pc_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert_eq!(pcs(&["train", "--config", &cfg, "--run-dir", run_s]).status.code(), Some(0));
    assert_eq!(pcs(&["evaluate", "--pc", "not json", "--run-dir", run_s]).status.code(), Some(1));
    let o = pcs(&["evaluate", "--pc", "[0, 0, 99]", "--run-dir", run_s]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = pcs(&["gen-data", "--config", path.to_str().unwrap(), "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1400 train / 300 val / 300 test"));
}
