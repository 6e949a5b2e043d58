//! End-to-end runs of the `dmnet` binary on a tiny synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dmnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn tiny_config(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let text = format!(
        r#"
[data]
root = "{root}"
fold_file = "{root}/folds.toml"
fold = 0
n_images = 48
image_size = 32
gen_seed = 3
test_classes_per_fold = 2

[model]
reduce_dim = 8

[train]
seed = 0
iterations = 6
iters_per_epoch = 3
batch_size = 2
lr = 0.01
log_every = 2

[eval]
pairs = 8
shots = 1
seed = 0
"#,
        root = root.display()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny_config(dir);
    let cfg_s = cfg.to_str().unwrap();
    ok(dmnet(&["gen-data", "--config", cfg_s], dir));
    assert!(dir.join("data/folds.toml").exists());

    ok(dmnet(&["train", "--config", cfg_s, "--seed", "1", "--out", "a"], dir));
    ok(dmnet(&["train", "--config", cfg_s, "--seed", "1", "--out", "b"], dir));
    let log_a = fs::read_to_string(dir.join("a/loss_log.csv")).unwrap();
    assert_eq!(log_a, fs::read_to_string(dir.join("b/loss_log.csv")).unwrap());
    assert_eq!(log_a.lines().count(), 7);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    let extra = &manifest["extra"];
    assert!(extra["backbone_digest_before"].is_string());
    assert_eq!(extra["backbone_digest_before"], extra["backbone_digest_after"]);

    ok(dmnet(
        &["eval", "--checkpoint", "a/checkpoint.json", "--config", cfg_s, "--pairs", "6", "--out", "ev"],
        dir,
    ));
    for f in ["report.txt", "report.json", "per_class.csv", "pairs.csv", "effective_config.toml", "manifest.json"] {
        assert!(dir.join("ev").join(f).exists(), "missing {f}");
    }
    let pairs = fs::read_to_string(dir.join("ev/pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 7);
    let row: Vec<&str> = pairs.lines().nth(1).unwrap().split(',').collect();
    let (class, query, support) = (row[0], row[1], row[2]);

    ok(dmnet(
        &[
            "predict", "--checkpoint", "a/checkpoint.json", "--config", cfg_s, "--class", class, "--query", query,
            "--support", support, "--out", "pred",
        ],
        dir,
    ));
    let mask = image::open(dir.join(format!("pred/{query}_mask.png"))).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
    assert!(dir.join(format!("pred/{query}_overlay.png")).exists());

    ok(dmnet(&["plot", "--eval", "ev", "--loss", "a/loss_log.csv", "--out", "plots"], dir));
    for f in ["per_class.svg", "scale_vs_iou.svg", "loss.svg"] {
        let svg = fs::read_to_string(dir.join("plots").join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }

    // unknown class is a usage error, a missing support image a data error
    let o = dmnet(
        &["predict", "--checkpoint", "a/checkpoint.json", "--config", cfg_s, "--class", "nope", "--query", query, "--support", support],
        dir,
    );
    assert_eq!(code(&o), 1);
    let o = dmnet(
        &["predict", "--checkpoint", "a/checkpoint.json", "--config", cfg_s, "--class", class, "--query", query, "--support", "missing"],
        dir,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&dmnet(&["frobnicate"], dir)), 1);
    assert_eq!(code(&dmnet(&["train", "--config", "absent.toml"], dir)), 1);
    fs::write(dir.join("bad.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&dmnet(&["train", "--config", "bad.toml"], dir)), 1);
    fs::write(dir.join("junk.json"), "{}").unwrap();
    assert_eq!(code(&dmnet(&["eval", "--checkpoint", "junk.json"], dir)), 1);
    assert_eq!(code(&dmnet(&["--help"], dir)), 0);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_eq!(code(&dmnet(&["train", "--config", cfg.to_str().unwrap()], tmp.path())), 2);
}
