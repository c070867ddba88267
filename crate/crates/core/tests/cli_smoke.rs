//! End-to-end runs of every subcommand on generated data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radial_canon::data::{read_manifest, lit_sphere};
use radial_canon::rbt::RawTensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_radial-canon"));
    c.env_remove("RADIAL_CANON_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(
        o.status.success(),
        "{args:?} failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CFG: &str = "\
# smoke run
batch_size = 2
num_beams = 8
latent_dim = 8
learning_rate = 0.001
iterations = 3
seed = 7
";

/// Trains a tiny model on a few generated spheres and returns the run dir.
fn tiny_model(root: &Path) -> PathBuf {
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY_CFG).unwrap();
    let run_dir = root.join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--count",
        "4",
        "--size",
        "32",
        "--out",
        s(&run_dir),
    ]);
    run_dir
}

fn sphere_png(root: &Path) -> PathBuf {
    let p = root.join("sphere.png");
    lit_sphere(32, 90.0, 0.4, 0.9).save_png(&p).unwrap();
    p
}

#[test]
fn geometry_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "geometry",
        "--beams",
        "16",
        "--length",
        "32",
        "--thickness",
        "1",
        "--exact",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.contains("beams = [16]"));
    let csv = fs::read_to_string(dir.path().join("geometry.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').count(), 8);
}

#[test]
fn sample_writes_beam_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let png = sphere_png(dir.path());
    ok(&["sample", "--input", s(&png), "--beams", "8", "--out", s(dir.path())]);
    let t = RawTensor::load(dir.path().join("beams.rbt")).unwrap();
    assert_eq!(t.dims, vec![8, 3, 16, 1]);
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&[
        "gen-data",
        "--kind",
        "oriented_glyph",
        "--size",
        "32",
        "--count",
        "5",
        "--rotate",
        "finite",
        "--beams",
        "8",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    let rows = read_manifest(out.join("manifest.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(out.join(&r.filename).exists());
        let k = r.k.unwrap();
        assert!((r.theta_degrees - 45.0 * k as f64).abs() < 1e-9);
    }
}

#[test]
fn seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("RADIAL_CANON_SEED", "99")
        .args(["gen-data", "--count", "2", "--size", "32", "--seed", "1", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 99"));
}

#[test]
fn train_then_every_model_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run_dir = tiny_model(root);
    let model = run_dir.join("model.ckpt");
    assert!(model.exists());
    let loss = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    let png = sphere_png(root);

    let out = ok(&[
        "canonicalize",
        "--model",
        s(&model),
        "--input",
        s(&png),
        "--output",
        "y.png",
        "--out",
        s(root),
    ]);
    assert!(root.join("y.png").exists());
    assert!(out.contains("predicted_angle_deg = "));

    ok(&["saliency", "--model", s(&model), "--input", s(&png), "--target", "-30", "--out", s(root)]);
    assert!(root.join("saliency.png").exists());

    let evald = root.join("eval");
    let out = ok(&[
        "eval",
        "--model",
        s(&model),
        "--count",
        "3",
        "--size",
        "32",
        "--threads",
        "2",
        "--out",
        s(&evald),
    ]);
    assert!(out.contains("mean_error_deg = "));
    assert_eq!(fs::read_to_string(evald.join("histogram.csv")).unwrap().lines().count(), 19);
    assert_eq!(fs::read_to_string(evald.join("eval.csv")).unwrap().lines().count(), 2);

    let stab = root.join("stab");
    ok(&[
        "stability",
        "--model",
        s(&model),
        "--count",
        "2",
        "--size",
        "32",
        "--max-shift",
        "1",
        "--out",
        s(&stab),
    ]);
    let csv = fs::read_to_string(stab.join("stability.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dx,dy,mean_deviation_deg");
    assert_eq!(csv.lines().count(), 10);

    ok(&["export-embeddings", "--model", s(&model), "--input", s(&png), "--out", s(root)]);
    let t = RawTensor::load(root.join("embeddings.rbt")).unwrap();
    assert_eq!(t.dims, vec![64, 8]);
}

#[test]
fn baselines_need_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "eval",
        "--predictor",
        "random",
        "--count",
        "4",
        "--size",
        "32",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.contains("count = 4"));
}

#[test]
fn exit_codes() {
    let o = run(&["geometry", "--beams", "8", "--length", "8", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["canonicalize", "--model", "/nonexistent/m.ckpt", "--input", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = run(&["eval", "--count", "2", "--size", "32"]);
    assert_eq!(o.status.code(), Some(2));
}
