use std::fs;
use std::path::{Path, PathBuf};

use gcg_core::checkpoint;
use gcg_core::experiment::ExperimentConfig;
use gcg_core::model::{Model, ModelConfig};
use gcg_core::attention::AttentionKind;
use gcg_core::{cli, Error};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("gcg").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn compact_json() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/compact.json")
}

#[test]
fn shipped_compact_config_matches_code() {
    // the CLI derives the sub-seeds from the master seed on load
    let loaded = ExperimentConfig::load(&compact_json()).unwrap();
    assert_eq!(loaded.clone().with_seed(loaded.seed), ExperimentConfig::compact());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["train", "--bogus"]), 1);
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent", "--out", s(d)]), 2);

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": -1}}"#).unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&d.join("x"))]), 1);
    assert_eq!(run(&["gen-data", "--preset", "nine", "--out", s(&d.join("x"))]), 1);

    assert_eq!(Error::NonFiniteGradient { param: "w".into() }.exit_code(), 3);
    assert_eq!(Error::Data("x".into()).exit_code(), 2);
}

#[test]
fn gen_train_eval_explain_file_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    assert_eq!(
        run(&["gen-data", "--seed", "3", "--samples-per-class", "6,6,6", "--image-size", "24", "--out", s(&data)]),
        0
    );
    assert!(data.join("img_0001.ppm").exists());
    assert!(data.join("img_0018.ppm").exists());
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next(), Some("path,label,split"));
    assert_eq!(manifest.lines().count(), 19);

    let m = d.join("model");
    let code = run(&[
        "train", "--config", s(&compact_json()), "--epochs", "1", "--data", s(&data), "--out", s(&m),
    ]);
    assert_eq!(code, 0);
    for f in ["config.json", "train_log.jsonl", "best.ckpt", "val_metrics.json"] {
        assert!(m.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(m.join("train_log.jsonl")).unwrap();
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_loss", "val_accuracy", "lr", "timestamp"] {
        assert!(entry.get(key).is_some(), "log lacks {key}");
    }

    let e = d.join("eval");
    assert_eq!(run(&["eval", "--checkpoint", s(&m.join("best.ckpt")), "--data", s(&data), "--out", s(&e)]), 0);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(e.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("kappa").is_some());

    let h = d.join("heat");
    let img = data.join("img_0002.ppm");
    assert_eq!(
        run(&["explain", "--checkpoint", s(&m.join("best.ckpt")), "--image", s(&img), "--channel", "spatial_map", "--out", s(&h)]),
        0
    );
    assert!(h.join("img_0002.spatial_map.pgm").exists());
    assert!(h.join("img_0002.overlay.ppm").exists());
}

#[test]
fn explain_rejects_non_gcg_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        input_size: [16, 16, 3],
        backbone_channels: vec![4, 4],
        head_widths: vec![4],
        attention: AttentionKind::ChannelSe,
        ..Default::default()
    };
    let ckpt = dir.path().join("se.ckpt");
    checkpoint::save(&Model::build(cfg, 1).unwrap(), &ckpt).unwrap();
    let img = dir.path().join("i.ppm");
    gcg_core::pnm::write_ppm(&img, &gcg_core::pnm::RgbImage::new(16, 16)).unwrap();
    assert_eq!(
        run(&["explain", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(dir.path())]),
        1
    );
}
