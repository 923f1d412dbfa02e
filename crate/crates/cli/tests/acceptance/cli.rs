//! Criteria exercised through the `facefit` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use facefit::io::write_obj;
use facefit::model::{synthesize_toy_model, vertex_normals, Mesh, ToyModelSpec};

use crate::checks::Outcome;

const SMALL_CONFIG: &str = r#"
image_size = 64
uv_size = 32
[toy_model]
subdivisions = 2
shape_dim = 10
expression_dim = 6
albedo_dim = 5
[[fit.stages]]
name = "landmarks"
kind = "landmarks"
iterations = 30
freeze = ["albedo", "light"]
[[fit.stages]]
name = "full"
kind = "full"
iterations = 30
[fit.train]
iterations = 5
[fixture]
subjects = 2
train_expressions = 2
"#;

fn facefit(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_facefit"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot start facefit: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "facefit {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

pub fn protocol_echo() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = synthesize_toy_model(&ToyModelSpec {
        subdivisions: 3,
        ..Default::default()
    });
    // toy units are decimetres; the protocol works in millimetres
    let scan: Vec<_> = model.template.iter().map(|v| v * 100.0).collect();
    let normals = vertex_normals(&scan, &model.triangles).map_err(|e| e.to_string())?;
    let offset: Vec<_> = scan
        .iter()
        .zip(&normals)
        .map(|(p, n)| p + n * 1.0)
        .collect();
    let scan_path = dir.path().join("scan.obj");
    let mesh_path = dir.path().join("mesh.obj");
    write_obj(
        &scan_path,
        &Mesh::new(scan, model.triangles.clone(), model.uv.clone()),
    )
    .map_err(|e| e.to_string())?;
    write_obj(
        &mesh_path,
        &Mesh::new(offset, model.triangles.clone(), model.uv.clone()),
    )
    .map_err(|e| e.to_string())?;
    let out = dir.path().join("eval");
    facefit(&[
        "eval",
        "--scan",
        s(&scan_path),
        "--mesh",
        s(&mesh_path),
        "--out",
        s(&out),
    ])?;
    let stats: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("stats.json")).map_err(|e| format!("stats.json: {e}"))?,
    )
    .map_err(|e| e.to_string())?;
    let mean = stats["mean"].as_f64().ok_or("stats.json has no mean")?;
    let median = stats["median"].as_f64().unwrap_or(f64::NAN);
    let summary = format!(
        "{} scan vertices: mean {mean:.4} mm, median {median:.4} mm",
        stats["count"]
    );
    if (mean - 1.0).abs() <= 0.02 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Runs the seeded pipeline into `root`.
fn pipeline_run(root: &Path, config: &Path) -> Result<(), String> {
    let common = ["--config", s(config), "--seed", "7"];
    let model_dir = root.join("model");
    let model = model_dir.join("model.ffa");
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend_from_slice(&common);
        facefit(&args)
    };
    run(&["make-toy-model", "--out", s(&model_dir)])?;
    let render = root.join("render");
    run(&["render", "--model", s(&model), "--out", s(&render)])?;
    run(&[
        "fit",
        "--model",
        s(&model),
        "--image",
        s(&render.join("image.pfm")),
        "--landmarks",
        s(&render.join("landmarks.txt")),
        "--mask",
        s(&render.join("mask.pfm")),
        "--out",
        s(&root.join("fit")),
    ])?;
    run(&[
        "train-decoder",
        "--model",
        s(&model),
        "--out",
        s(&root.join("train")),
    ])?;
    Ok(())
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root").to_path_buf();
            out.insert(rel, std::fs::read(&path)?);
        }
    }
    Ok(())
}

pub fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        pipeline_run(&root, &config)?;
        let mut files = BTreeMap::new();
        collect(&root, &root, &mut files).map_err(|e| e.to_string())?;
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let names: Vec<_> = a.keys().collect();
    if names != b.keys().collect::<Vec<_>>() {
        return Err("the two runs wrote different file sets".into());
    }
    for required in ["fit/code.json", "train/decoder.ffa"] {
        if !a.contains_key(Path::new(required)) {
            return Err(format!("missing output {required}"));
        }
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    if differing.is_empty() {
        Ok(format!(
            "{} output files byte-identical across two seeded runs",
            a.len()
        ))
    } else {
        Err(format!("differing outputs: {}", differing.join(", ")))
    }
}
