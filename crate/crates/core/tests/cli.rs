use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pyfu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyfu"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 0
preset = "pfb-pfh"

[model]
channels = 8
lidar_widths = [4, 4, 8, 8, 8, 8]
camera_widths = [4, 4, 8, 8, 8, 8]
expansion = 2

[train]
base_lr = 0.02
iterations = 6
eval_every = 3

[data]
train = "data/train"
val = "data/val"
out = "runs/small"
"#;

fn dataset(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let o = pyfu(dir, &["synth", "--config", "small.toml", "--frames", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = pyfu(dir, &["synth", "--config", "small.toml", "--frames", "2", "--seed", "5", "--dest", "data/val"]);
    assert!(o.status.success());
}

#[test]
fn selftest_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = pyfu(dir.path(), &["selftest", "--points", "3000", "--instances", "10"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    for suite in ["gradients", "projection", "knn"] {
        assert!(text.contains(&format!("{suite} suite passed")), "{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    // the ground-truth label files are perfect point predictions
    let o = pyfu(
        dir.path(),
        &["eval", "--config", "small.toml", "--data", "data/val", "--predictions", "data/val/labels", "--head", "lidar"],
    );
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    let miou = text.lines().find(|l| l.starts_with("mIoU")).unwrap();
    assert_eq!(miou.split_whitespace().nth(1), Some("1.0000"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("runs/small/eval.json")).unwrap()).unwrap();
    assert_eq!(json["miou"], 1.0);
    assert_eq!(json["accuracy"], 1.0);
}

#[test]
fn train_twice_gives_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let mut runs = Vec::new();
    for out in ["runs/a", "runs/b"] {
        let o = pyfu(d, &["train", "--config", "small.toml", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push((
            fs::read(d.join(out).join("metrics.jsonl")).unwrap(),
            fs::read(d.join(out).join("checkpoint.pyfu")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
    let log = String::from_utf8(runs[0].0.clone()).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().nth(2).unwrap().contains("\"miou\""));

    let o = pyfu(d, &["train", "--config", "small.toml", "--seed", "8", "--out", "runs/c"]);
    assert!(o.status.success());
    assert_ne!(fs::read(d.join("runs/c/metrics.jsonl")).unwrap(), runs[0].0);
}

#[test]
fn eval_renders_and_infer_writes_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    assert!(pyfu(d, &["train", "--config", "small.toml"]).status.success());
    let o = pyfu(d, &["eval", "--config", "small.toml", "--render", "renders"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("sphere-blue"));
    let img = pyfu_core::dataio::read_ppm(&d.join("renders/000000.ppm")).unwrap();
    assert_eq!((img.shape().h, img.shape().w), (32, 256));

    let o = pyfu(d, &["infer", "--config", "small.toml", "--data", "data/val"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["000000", "000001"] {
        let pred = pyfu_core::dataio::read_label_file(&d.join(format!("runs/small/predictions/{id}.label"))).unwrap();
        let scan = pyfu_core::dataio::read_scan(&d.join(format!("data/val/velodyne/{id}.bin"))).unwrap();
        assert_eq!(pred.len(), scan.len());
        assert!(pred.iter().all(|w| *w < 6));
    }
    // refined predictions can be scored like any other
    let o = pyfu(d, &["eval", "--config", "small.toml", "--predictions", "runs/small/predictions", "--head", "lidar"]);
    assert!(o.status.success());
}

#[test]
fn fused_run_initialises_from_pretrained_backbones() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let o = pyfu(d, &["train", "--config", "small.toml", "--preset", "baseline", "--out", "runs/lidar"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = format!(
        "{SMALL}\n[[data.init]]\npath = \"runs/lidar/checkpoint.pyfu\"\nprefix = \"lidar.\"\n"
    );
    fs::write(d.join("fused.toml"), cfg).unwrap();
    let o = pyfu(d, &["train", "--config", "fused.toml", "--out", "runs/fused"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("initialised"));

    // frozen lidar backbone: its tensors come through training unchanged
    let pre = pyfu_core::pyfu::Checkpoint::load(&d.join("runs/lidar/checkpoint.pyfu")).unwrap();
    let post = pyfu_core::pyfu::Checkpoint::load(&d.join("runs/fused/checkpoint.pyfu")).unwrap();
    let lidar: Vec<_> = pre.entries.iter().filter(|e| e.name.starts_with("lidar.")).collect();
    assert!(!lidar.is_empty());
    for e in lidar {
        let other = post.entries.iter().find(|o| o.name == e.name).unwrap();
        assert_eq!(other, e, "{}", e.name);
    }
}
