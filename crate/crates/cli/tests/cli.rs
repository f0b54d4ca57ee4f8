use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sst_core::data::{load_manifest, Split, StainStyleParams};
use sst_core::training::TrainHistory;

fn sst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sst")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sst(args);
    assert!(
        out.status.success(),
        "sst {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_styles(dir: &Path) -> (PathBuf, PathBuf) {
    let a = dir.join("a.json");
    let b = dir.join("b.json");
    std::fs::write(&a, serde_json::to_string(&StainStyleParams::reference_a()).unwrap()).unwrap();
    std::fs::write(&b, serde_json::to_string(&StainStyleParams::reference_b()).unwrap()).unwrap();
    (a, b)
}

fn synth(dir: &Path, out: &Path, seed: &str) {
    let (a, b) = write_styles(dir);
    ok(&["synth-data", "--style-a", s(&a), "--style-b", s(&b), "--counts", "8,4,4", "--d", "16", "--out", s(out), "--seed", seed]);
}

#[test]
fn synth_data_writes_reloadable_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    synth(tmp.path(), &out, "3");
    for (name, n, inst) in [("train", 8, "A"), ("val", 4, "A"), ("test", 4, "B")] {
        let ds = load_manifest(&out.join(name).join("manifest.csv"), Split::Test).unwrap();
        assert_eq!(ds.len(), n);
        assert!(ds.is_balanced());
        assert!(ds.tiles().iter().all(|t| t.institute == inst));
    }
}

#[test]
fn synth_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = (tmp.path().join("x"), tmp.path().join("y"));
    synth(tmp.path(), &x, "5");
    synth(tmp.path(), &y, "5");
    for name in ["train", "val", "test"] {
        let mut files: Vec<_> = std::fs::read_dir(x.join(name)).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        for f in files {
            let a = std::fs::read(x.join(name).join(&f)).unwrap();
            let b = std::fs::read(y.join(name).join(&f)).unwrap();
            assert_eq!(a, b, "{name}/{f:?}");
        }
    }
}

#[test]
fn missing_required_flags_are_usage_errors() {
    let out = sst(&["synth-data", "--style-a", "a.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--style-b") && err.contains("Usage"), "{err}");

    let out = sst(&["evaluate", "--data", "m.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--classifier"));
}

#[test]
fn runtime_failures_exit_one_with_a_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let out = sst(&["transfer", "--generator", s(&missing), "--in", "x.png", "--out", "y.png"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("nope.ckpt"), "{err}");
}

#[test]
fn full_pipeline_on_tiny_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bench = dir.join("bench");
    synth(dir, &bench, "1");
    let train = bench.join("train/manifest.csv");
    let val = bench.join("val/manifest.csv");
    let test = bench.join("test/manifest.csv");

    // The config asks for 3 epochs; the flag wins.
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 3, "batch_size": 4, "architecture": {"classifier_width": 4, "generator_width": 4, "discriminator_width": 4}}"#).unwrap();
    let cls = dir.join("cls.ckpt");
    let hist = dir.join("cls.jsonl");
    ok(&[
        "train-classifier", "--train", s(&train), "--val", s(&val), "--out", s(&cls), "--config", s(&cfg),
        "--epochs", "1", "--history", s(&hist),
    ]);
    assert_eq!(TrainHistory::read_jsonl(&hist).unwrap().records.len(), 1);

    let gen = dir.join("gen.ckpt");
    let hist = dir.join("sst.jsonl");
    ok(&[
        "train-sst", "--train", s(&train), "--val", s(&val), "--classifier", s(&cls), "--out", s(&gen),
        "--config", s(&cfg), "--max-steps-per-epoch", "1", "--history", s(&hist),
    ]);
    let h = TrainHistory::read_jsonl(&hist).unwrap();
    assert_eq!(h.records.len(), 3);
    assert!(h.records.iter().all(|r| r.collapse_std.is_some()));

    let tile_in = bench.join("test/tile_00000.png");
    let tile_out = dir.join("out.png");
    ok(&["transfer", "--generator", s(&gen), "--in", s(&tile_in), "--out", s(&tile_out)]);
    let a = sst_core::data::read_png(&tile_in).unwrap();
    let b = sst_core::data::read_png(&tile_out).unwrap();
    assert_eq!(a.d(), b.d());

    let targets = dir.join("targets.json");
    ok(&["fit-baseline", "--data", s(&train), "--out", s(&targets)]);
    let single = dir.join("single.json");
    let msg = ok(&["fit-baseline", "--data", s(&train), "--out", s(&single), "--reference-index", "2"]);
    assert!(msg.contains("1 tile"), "{msg}");

    let table = ok(&[
        "compare", "--classifier", s(&cls), "--data", s(&test), "--generator", s(&gen), "--baselines", s(&targets),
        "--methods", "sst,macenko,reinhard,hs,identity",
    ]);
    for m in ["sst", "macenko", "reinhard", "hs", "identity"] {
        assert!(table.lines().any(|l| l.trim_start().starts_with(m)), "{m} missing:\n{table}");
    }

    let json = ok(&[
        "compare", "--classifier", s(&cls), "--data", s(&test), "--generator", s(&gen), "--baselines", s(&targets),
        "--methods", "sst,macenko,reinhard,hs,identity", "--json",
    ]);
    let rows: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);

    let one = ok(&["evaluate", "--classifier", s(&cls), "--data", s(&test), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&one).unwrap();
    assert_eq!(v[0]["method_name"], "identity");
    assert_eq!(v[0]["n_samples"], 4);
}
