use std::path::Path;
use std::process::{Command, Output};

use hic_harness::dataset::encode_idx;

const SMALL: &str = r#"
seed = 3

[dataset]
train_per_class = 40
test_per_class = 20

[training]
epochs = 1
batch_size = 20

[network]
layers = [
  { kind = "dense", units = 4 },
  { kind = "relu" },
  { kind = "dense", units = 2 },
  { kind = "softmax-xent" },
]

[output]
event_log = true
"#;

fn hic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hic")).args(args).args(["--log-level", "warn"]).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[training]\nlr = 0.1\n");
    let o = hic(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[training]\nbatch_size = 0\n");
    let o = hic(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = hic(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn malformed_idx_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let good_labels = dir.path().join("labels.idx");
    std::fs::write(&good_labels, encode_idx(&[2], &[0, 1])).unwrap();
    let bad_images = dir.path().join("images.idx");
    std::fs::write(&bad_images, [0u8, 0, 8, 3, 0, 0, 0, 2]).unwrap();
    let cfg = format!(
        "[dataset]\nkind = \"image-idx\"\ntrain_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n",
        bad_images, good_labels, bad_images, good_labels
    );
    let cfg = write(dir.path(), "c.toml", &cfg);
    let o = hic(&["dataset", "gen", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("images.idx"));
}

#[test]
fn divergence_exits_3_and_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("batch_size = 20", "batch_size = 20\nlearning_rate = 1e300")
        .replace("[network]", "[network]\nbackend = \"digital\"");
    let cfg = write(dir.path(), "c.toml", &cfg);
    let out = dir.path().join("o");
    let o = hic(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let summary = std::fs::read_to_string(out.join("summary.toml")).unwrap();
    assert!(summary.contains("diverged = true"));
}

#[test]
fn train_endurance_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("run");
    let o = hic(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "metrics.csv", "summary.toml", "checkpoint.bin", "events.bin", "endurance.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("run_id,epoch,step,sim_time_s,"));

    let rep = dir.path().join("rep");
    let o = hic(&["endurance", "--run-dir", out.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(rep.join("endurance.csv")).unwrap(), std::fs::read(out.join("endurance.csv")).unwrap());

    let o = hic(&["export-events", out.join("events.bin").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 1);
    let cols = text.lines().next().unwrap().split('\t').count();
    assert!(text.lines().all(|l| l.split('\t').count() == cols));
}

#[test]
fn stored_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(hic(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let stored = a.join("config.toml");
    assert!(hic(&["train", "--config", stored.to_str().unwrap(), "--out", b.to_str().unwrap()]).status.success());
    for f in ["config.toml", "metrics.csv", "summary.toml", "checkpoint.bin", "events.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(hic(&["train", "--config", &cfg, "--seed", "1", "--out", a.to_str().unwrap()]).status.success());
    assert!(hic(&["train", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());
}
