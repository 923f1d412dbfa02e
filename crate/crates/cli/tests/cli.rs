use std::path::Path;
use std::process::{Command, Output};

use facefit::io::{load_model, obj_string, write_obj};
use facefit::model::{Mesh, Vec3};

fn facefit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facefit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = facefit(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "[toy_model]\nsubdivisions = 1\nshape_dim = 4\nexpression_dim = 3\nalbedo_dim = 2\nuv_size = 16\n";

#[test]
fn toy_model_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    for run in ["a", "b", "c"] {
        let seed = if run == "c" { "8" } else { "7" };
        ok(&[
            "make-toy-model",
            "--seed",
            seed,
            "--config",
            s(&config),
            "--out",
            s(&dir.path().join(run)),
        ]);
    }
    let read = |run: &str| std::fs::read(dir.path().join(run).join("model.ffa")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn zero_code_decodes_to_the_template() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let assets = dir.path().join("assets");
    ok(&[
        "make-toy-model",
        "--config",
        s(&config),
        "--out",
        s(&assets),
    ]);
    let out = dir.path().join("decoded");
    ok(&["decode", "--assets", s(&assets), "--out", s(&out)]);
    let (model, _) = load_model(&assets.join("model.ffa")).unwrap();
    let written = std::fs::read_to_string(out.join("mesh.obj")).unwrap();
    assert_eq!(written, obj_string(&model.template_mesh()));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = facefit(&["decode", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn failures_report_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ffa");
    let out = facefit(&[
        "decode",
        "--error-json",
        "--model",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let body: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(body["error"], "io");
    assert!(body["message"].as_str().unwrap().contains("missing.ffa"));

    let out = facefit(&["decode", "--model", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn eval_reports_hand_computed_statistics() {
    let dir = tempfile::tempdir().unwrap();
    // one large triangle in the z = 0 plane and points straight above it
    let plane = Mesh::new(
        vec![
            Vec3::new(-100.0, -100.0, 0.0),
            Vec3::new(100.0, -100.0, 0.0),
            Vec3::new(0.0, 100.0, 0.0),
        ],
        vec![[0, 1, 2]],
        vec![[0.0, 0.0]; 3],
    );
    let heights = [4.0, 1.0, 10.0, 3.0, 2.0];
    let scan = Mesh::new(
        heights
            .iter()
            .enumerate()
            .map(|(i, h)| Vec3::new(i as f64, 0.0, *h))
            .collect(),
        vec![],
        vec![],
    );
    let (scan_path, mesh_path) = (dir.path().join("scan.obj"), dir.path().join("mesh.obj"));
    write_obj(&scan_path, &scan).unwrap();
    write_obj(&mesh_path, &plane).unwrap();
    let out = dir.path().join("eval");
    let printed = ok(&[
        "eval",
        "--scan",
        s(&scan_path),
        "--mesh",
        s(&mesh_path),
        "--max-threshold",
        "10",
        "--thresholds",
        "11",
        "--out",
        s(&out),
    ]);
    let stats: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(stats["count"], 5);
    assert_eq!(stats["median"], 3.0);
    assert_eq!(stats["mean"], 4.0);
    assert_eq!(stats["std"], 10f64.sqrt());
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(saved, stats);
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let fractions: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(
        fractions,
        [0.0, 0.2, 0.4, 0.6, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 1.0]
    );
}

#[test]
fn filter_discards_inconsistent_detections() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.txt");
    let second = dir.path().join("b.txt");
    std::fs::write(&first, "10 10\n20 20\n30 30\n").unwrap();
    std::fs::write(&second, "10 10\n20 20\n30 50\n").unwrap();
    let run = |bbox: &str| {
        let printed = ok(&[
            "filter-landmarks",
            "--first",
            s(&first),
            "--second",
            s(&second),
            "--bbox",
            bbox,
            bbox,
            "--out",
            s(dir.path()),
        ]);
        serde_json::from_str::<serde_json::Value>(&printed).unwrap()
    };
    let strict = run("100");
    assert_eq!(strict["keep"], false);
    assert_eq!(strict["score"], 0.2);
    assert_eq!(strict["worst"], 2);
    assert_eq!(run("1000")["keep"], true);
}
