use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minenetcd"))
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn config(&self, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "model_id": "minenetcd-micro",
            "dataset_id": "synthetic",
            "dataset_root": self.root.join("data"),
            "synthetic": {"n_pairs": 6, "size": 64, "split": {"train": 0.5, "val": 0.0, "test": 0.5}},
            "train": {"batch_size": 2, "total_steps": 3},
            "output_dir": self.root.join("run"),
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.root.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }

    fn out(&self) -> PathBuf {
        self.root.join("run")
    }
}

fn pngs_under(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for site in std::fs::read_dir(dir).unwrap() {
        for f in std::fs::read_dir(site.unwrap().path()).unwrap() {
            found.push(f.unwrap().path());
        }
    }
    found.sort();
    found
}

#[test]
fn train_then_eval_predict_render() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({}));
    let cfg = cfg.to_str().unwrap();

    let out = run(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ws.out().join("checkpoint.bin").is_file());
    let log = std::fs::read_to_string(ws.out().join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0]["step"], 0);
    assert_eq!(records[0]["lr"], 1e-4);

    let out = run(&["eval", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    let keys: Vec<&String> = written.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["ciou", "f1", "oa", "pre", "rec"]);

    let out = run(&["predict", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let maps = pngs_under(&ws.out().join("predictions"));
    assert_eq!(maps.len(), 3);
    let map = image::open(&maps[0]).unwrap().to_luma8();
    assert_eq!(map.dimensions(), (64, 64));
    assert!(map.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    let out = run(&["render", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let renders = pngs_under(&ws.out().join("render"));
    assert_eq!(renders.len(), 3);
    let allowed = [[0, 255, 0], [255, 255, 255], [255, 0, 0], [0, 0, 255]];
    let img = image::open(&renders[0]).unwrap().to_rgb8();
    assert!(img.pixels().all(|p| allowed.contains(&p.0)));
}

#[test]
fn flags_override_the_config() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({}));
    let other = ws.root.join("elsewhere");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        other.to_str().unwrap(),
        "--seed",
        "5",
        "--override",
        "train.total_steps=2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(other.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(other.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["seed"], 5);
    assert!(!ws.out().exists());

    let ckpt = other.join("checkpoint.bin");
    let out = run(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({}));
    let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint"));
}

#[test]
fn unknown_key_is_a_config_error_naming_it() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({"train": {"lr_maxx": 0.1}}));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lr_maxx"), "{}", stderr(&out));
}

#[test]
fn unreadable_dataset_is_a_data_error() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({"dataset_id": "folder"}));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let ws = Workspace::new();
    let cfg = ws.config(json!({"train": {"batch_size": 2, "total_steps": 20, "lr_max": 1e38, "lr_min": 1e37}}));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_adjoint() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = run(&["gradcheck", "--corrupt-adjoint", "conv2d"]);
    assert_eq!(code(&out), 5);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL conv2d"), "{stdout}");
    assert!(stdout.contains("PASS add"), "{stdout}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        minenetcd::config::load_config(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}
