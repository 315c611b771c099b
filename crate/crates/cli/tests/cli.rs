use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lws"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SYNTHETIC: &str = "arch.family = relu_net
arch.depth = 1
arch.width = 8
data.kind = synthetic
data.train_size = 60
data.test_size = 30
data.shape = 1,4,4
data.classes = 3
schedule.lr = 0.01
train.epochs = 2
train.batch_size = 16
seeds = 1,2
";

#[test]
fn train_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SYNTHETIC);
    let out = dir.path().join("out");
    let o = lws(&[
        "train",
        &config,
        "--out-dir",
        out.to_str().unwrap(),
        "--seeds",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.json", "epochs_seed3.csv", "final_seed3.lws"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("epochs_seed1.csv").exists());
    let csv = fs::read_to_string(out.join("epochs_seed3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SYNTHETIC);
    let out = dir.path().join("out");
    let o = lws(&[
        "train",
        &config,
        "--out-dir",
        out.to_str().unwrap(),
        "--override",
        "train.epochs=1",
        "--override",
        "seeds=4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("epochs_seed4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &format!("{SYNTHETIC}policy.kind = sideways\n"));
    assert_eq!(lws(&["train", &bad]).status.code(), Some(2));
    let missing = dir.path().join("absent.conf");
    assert_eq!(
        lws(&["train", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let no_data = write_config(
        dir.path(),
        "arch.family = relu_net\narch.depth = 1\narch.width = 8\ndata.kind = idx\ndata.dir = nowhere\nschedule.lr = 0.1\n",
    );
    assert_eq!(lws(&["train", &no_data]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SYNTHETIC);
    let out = dir.path().join("out");
    let o = lws(&[
        "train",
        &config,
        "--out-dir",
        out.to_str().unwrap(),
        "--override",
        "schedule.lr=1e30",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        lws_core::experiment::parse_key_values(&text).unwrap();
        seen += 1;
    }
    assert!(seen >= 5);
    let out = tempfile::tempdir().unwrap();
    let smoke = dir.join("synthetic_smoke.conf");
    let o = lws(&[
        "train",
        smoke.to_str().unwrap(),
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
