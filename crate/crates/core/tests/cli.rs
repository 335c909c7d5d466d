use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn asag(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_asag")).args(args).output().expect("spawn asag");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) {
    let out = asag(args);
    assert!(out.status.success(), "asag {args:?} exited with {:?}", out.status.code());
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Train the bundled tiny dataset once into `dir/run`.
fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = data("tiny.json");
    let run = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data("tiny")), "--out", s(&run)]);
    run
}

#[test]
fn pipeline_on_tiny_data() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    for f in ["weights.bin", "last.ckpt", "loss.csv", "resolved-config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let losses = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    // Header plus one row per training step.
    assert!(losses.lines().count() > 1);

    let w = run.join("weights.bin");
    let tiny = data("tiny");
    let inf = dir.path().join("infer");
    ok(&["infer", "--weights", s(&w), "--data", s(&tiny), "--out", s(&inf), "--roi-features"]);
    let anchors = std::fs::read_to_string(inf.join("anchors.jsonl")).unwrap();
    let first: Value = serde_json::from_str(anchors.lines().next().unwrap()).unwrap();
    for key in ["scene", "rank", "level", "cx", "cy", "w", "h", "score"] {
        assert!(first.get(key).is_some(), "anchor line lacks {key}");
    }
    assert!(inf.join("roi_features.bin").exists());
    assert_eq!(std::fs::read_to_string(inf.join("traces.jsonl")).unwrap().lines().count(), 4);

    let ev = dir.path().join("eval");
    ok(&["eval", "--weights", s(&w), "--data", s(&tiny), "--out", s(&ev)]);
    let recall = read_json(&ev.join("recall.json"));
    let ar50 = recall["recall"]["ar50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ar50));

    let st = dir.path().join("stats");
    ok(&["stats", "--weights", s(&w), "--data", s(&tiny), "--out", s(&st)]);
    assert!(st.join("stats.json").exists());
    assert_eq!(std::fs::read_to_string(st.join("counts.csv")).unwrap().lines().count(), 5);

    let sw = dir.path().join("sweep");
    ok(&["sweep", "--weights", s(&w), "--data", s(&tiny), "--out", s(&sw)]);
    // Header, eight threshold rows and the two toggles.
    assert_eq!(std::fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().count(), 11);
}

#[test]
fn fixed_part_is_unaffected_by_lowest_level() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let w = run.join("weights.bin");
    let ineligible = |level: &str| -> Vec<String> {
        let out = dir.path().join(format!("infer{level}"));
        ok(&["infer", "--weights", s(&w), "--data", s(&data("tiny")), "--out", s(&out), "--lowest-level", level]);
        std::fs::read_to_string(out.join("pool.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                v["level"].as_u64().unwrap() >= 5 && !v["eligible"].as_bool().unwrap()
            })
            .map(str::to_owned)
            .collect()
    };
    let p5 = ineligible("5");
    assert!(!p5.is_empty());
    assert_eq!(ineligible("4"), p5);
    assert_eq!(ineligible("3"), p5);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = data("tiny.json");
    ok(&["synth", "--config", s(&cfg), "--out", s(&a), "--scenes", "3", "--seed", "9"]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b), "--scenes", "3", "--seed", "9"]);
    let read = |d: &Path| std::fs::read(d.join("features.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let bad_key = asag(&["synth", "--out", s(&out), "--set", "gen.bogus=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("gen.bogus"));

    let bad_range = asag(&["synth", "--out", s(&out), "--set", "synth.p3_size=10"]);
    assert_eq!(bad_range.status.code(), Some(2));

    let missing = dir.path().join("missing.bin");
    let no_weights = asag(&["eval", "--weights", s(&missing), "--data", s(&data("tiny")), "--out", s(&out)]);
    assert_eq!(no_weights.status.code(), Some(3));
}
