#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{real_fixture, write_fixture};

fn mtsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mtsc(args);
    assert!(
        out.status.success(),
        "mtsc {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 8] = [
    "--set",
    "data.window=256",
    "--set",
    "train.steps_per_epoch=2",
    "--set",
    "train.batch_size=4",
    "--epochs",
    "1",
];

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn fixture(tails: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    write_fixture(&data, &real_fixture(tails, 1800, 11));
    Fixture { _tmp: tmp, root, data }
}

fn train_small(f: &Fixture, out: &Path) -> PathBuf {
    let mut args = vec!["train", "--data", s(&f.data), "--out", s(out), "--model", "conv-mhsa-small"];
    args.extend(QUICK);
    ok(&args);
    out.join("model.ckpt")
}

#[test]
fn round_trip_produces_all_artifacts() {
    let f = fixture(5);
    let ing = f.root.join("ing");
    let summary = ok(&["ingest", "--data", s(&f.data), "--out", s(&ing)]);
    assert!(summary.starts_with("ingested 20 flights, kept 20"), "{summary}");
    assert!(ing.join("manifest.csv").exists() && ing.join("counts.csv").exists());
    let folds = f.root.join("folds");
    ok(&["folds", "--data", s(&ing), "--out", s(&folds)]);
    let plan = folds.join("folds.csv");
    let run = f.root.join("run");
    let mut args = vec!["train", "--data", s(&ing), "--out", s(&run), "--folds", s(&plan), "--fold", "2"];
    args.extend(QUICK);
    args.extend(["--model", "conv-mhsa-small"]);
    ok(&args);
    for file in ["config.cfg", "run.jsonl", "loss_curve.csv", "model.ckpt", "model.cfg"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,lr,train_loss,val_loss"));
    assert_eq!(curve.lines().count(), 3);

    let ckpt = run.join("model.ckpt");
    let evald = f.root.join("eval");
    let line = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&ing), "--folds", s(&plan), "--fold", "2", "--out", s(&evald),
    ]);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    for key in ["loss", "roc_auc", "pr_auc", "accuracy"] {
        assert!(v[key].is_number(), "{key} in {line}");
    }
    assert_eq!(v["flights"], 4);
    assert!(evald.join("eval.json").exists());

    let a = f.data.join("flights").join("T000-F0.csv");
    let b = f.data.join("flights").join("T001-F3.csv");
    let out = ok(&["predict", "--checkpoint", s(&ckpt), "--flight", s(&a), s(&b)]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("T000-F0,") && rows[1].starts_with("T001-F3,"));
    for r in rows {
        let p: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn predictions_are_bit_stable() {
    let f = fixture(5);
    let ckpt = train_small(&f, &f.root.join("run"));
    let flight = f.data.join("flights").join("T002-F1.csv");
    let first = ok(&["predict", "--checkpoint", s(&ckpt), "--flight", s(&flight)]);
    let second = ok(&["predict", "--checkpoint", s(&ckpt), "--flight", s(&flight)]);
    assert_eq!(first, second);
}

#[test]
fn cross_validation_writes_every_fold() {
    let f = fixture(5);
    let out = f.root.join("cv");
    let printed = ok(&[
        "cv", "--data", s(&f.data), "--out", s(&out), "--model", "conv-mhsa", "--cluster", "c28", "--augment", "--seed",
        "7", "--set", "data.window=256", "--set", "train.steps_per_epoch=1", "--set", "train.batch_size=2", "--epochs",
        "1",
    ]);
    for k in 0..5 {
        let dir = out.join(format!("fold{k}"));
        for file in ["run.jsonl", "loss_curve.csv", "model.ckpt", "model.cfg"] {
            assert!(dir.join(file).exists(), "fold{k}/{file}");
        }
    }
    assert!(out.join("summary.csv").exists() && out.join("folds.csv").exists());
    assert!(printed.contains("mean of per-fold bests"), "{printed}");
    let cfg = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(cfg.contains("model.name = conv-mhsa\n"), "{cfg}");
    assert!(cfg.contains("train.augment = true"), "{cfg}");
    assert!(cfg.contains("train.seed = 7"), "{cfg}");
    assert!(cfg.contains("data.cluster = C28"), "{cfg}");
}

#[test]
fn overrides_beat_the_config_file() {
    let f = fixture(5);
    let file = f.root.join("run.cfg");
    fs::write(&file, "model.name = conv-lstm-small\ntrain.epochs = 3\ntrain.lr0 = 0.005\n").unwrap();
    let out = f.root.join("run");
    let mut args = vec!["train", "--data", s(&f.data), "--out", s(&out), "--config", s(&file)];
    // File says 3 epochs, the flag in QUICK says 1, the later --set says 2.
    args.extend(QUICK);
    args.extend(["--set", "train.epochs=2"]);
    ok(&args);
    let saved = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(saved.contains("model.name = conv-lstm-small"), "{saved}");
    assert!(saved.contains("train.epochs = 2"), "{saved}");
    assert!(saved.contains("train.lr0 = 0.005"), "{saved}");
    let records = fs::read_to_string(out.join("run.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
}

#[test]
fn configuration_errors_name_the_key() {
    let f = fixture(5);
    let out = mtsc(&["train", "--data", s(&f.data), "--out", s(&f.root.join("a")), "--set", "train.lrr=1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("train.lrr"), "{}", stderr(&out));
    let out = mtsc(&["train", "--data", s(&f.data), "--out", s(&f.root.join("b")), "--model", "resnet"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("resnet"));
    let out = mtsc(&["train", "--data", s(&f.data), "--out", s(&f.root.join("c")), "--set", "train.epochs=many"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = fixture(5);
    let missing = f.root.join("nowhere");
    let out = mtsc(&["ingest", "--data", s(&missing), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(4));
    let out = mtsc(&["predict", "--checkpoint", s(&missing), "--flight", s(&missing)]);
    assert_eq!(out.status.code(), Some(4));
    let out = mtsc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = f.root.join("bad");
    fs::create_dir_all(bad.join("flights")).unwrap();
    fs::write(
        bad.join("manifest.csv"),
        "flight_id,tail_id,cluster,label,day_offset,duration_seconds,path\nf1,t1,c28,7,1,1800,flights/f1.csv\n",
    )
    .unwrap();
    let out = mtsc(&["ingest", "--data", s(&bad), "--out", s(&f.root.join("y"))]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));

    let ckpt = train_small(&f, &f.root.join("run"));
    let out = mtsc(&["vae-curves", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&f.root.join("c.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_directory_is_protected_unless_overwrite() {
    let f = fixture(5);
    let out = f.root.join("folds");
    ok(&["folds", "--data", s(&f.data), "--out", s(&out)]);
    let again = mtsc(&["folds", "--data", s(&f.data), "--out", s(&out), "--seed", "3"]);
    assert_eq!(again.status.code(), Some(4));
    assert!(stderr(&again).contains("--overwrite"), "{}", stderr(&again));
    let before = fs::read_to_string(out.join("folds.csv")).unwrap();
    ok(&["folds", "--data", s(&f.data), "--out", s(&out), "--seed", "3", "--overwrite"]);
    let after = fs::read_to_string(out.join("folds.csv")).unwrap();
    assert_ne!(before, after);
}

#[test]
fn augment_preview_reports_the_draw() {
    let f = fixture(5);
    let flight = f.data.join("flights").join("T000-F0.csv");
    let donor = f.data.join("flights").join("T001-F2.csv");
    let out = f.root.join("aug.csv");
    let line = ok(&[
        "augment-preview", "--flight", s(&flight), "--donor", s(&donor), "--out", s(&out), "--set",
        "augment.p_apply=1", "--set", "data.window=512",
    ]);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v.is_object());
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 513);
}

#[test]
fn synthetic_dataset_has_markers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("synth");
    ok(&["synth", "--n", "16", "--length", "256", "--gap", "128", "--out", s(&out)]);
    let markers = fs::read_to_string(out.join("markers.csv")).unwrap();
    assert_eq!(markers.lines().next(), Some("flight_id,label,first,second"));
    assert_eq!(markers.lines().count(), 17);
    for row in markers.lines().skip(1) {
        let cols: Vec<usize> = row.split(',').skip(2).map(|c| c.parse().unwrap()).collect();
        assert!(cols[1] - cols[0] >= 128, "{row}");
    }
}
