use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
# small enough to train in a few seconds
depth = 1
base_channels = 4
groups = 2
n_subjects = 4
slices_per_subject = 2
image_size = 16
total_epochs = 2
rampup_epochs = 1
batch_size = 4
sweep_weights = 5
sweep_losses = mse,dice
";

fn mtseg(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mtseg")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "mtseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    let text = format!("{TINY}data_dir = {}\n", dir.join("data").display());
    fs::write(&cfg, text).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn gen_data_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    mtseg(&["gen-data", "--config", &cfg]);
    let manifest = fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 4 * 4 * 2);

    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    mtseg(&["adapt", "--config", &cfg, "--out-dir", run_s, "--seed", "3"]);
    let log = fs::read_to_string(run.join("epoch_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let eval = fs::read_to_string(run.join("evaluation.csv")).unwrap();
    let domains: std::collections::BTreeSet<_> =
        eval.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(domains.len(), 4);

    let ck = run.join("final.ckpt");
    let out = mtseg(&["evaluate", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), eval);

    let out = mtseg(&["export-features", "--checkpoint", ck.to_str().unwrap()]);
    let tsv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(tsv.lines().count(), 4 * 4 * 2);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3 + 256));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    mtseg(&["gen-data", "--config", &cfg]);
    let out = dir.path().join("sweep");
    mtseg(&["sweep", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn training_without_corpus_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_mtseg"))
        .args(["train", "--config", &cfg, "--out-dir", dir.path().join("run").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_config_key_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nepochs = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtseg"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("epochs"), "{err}");
}
