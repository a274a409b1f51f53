use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rdg_core::io::{read_pfm, write_pfm};
use rdg_core::synth::{Backdrop, SceneSpec};
use rdg_core::DepthMap;
use serde_json::Value;
use tempfile::TempDir;

fn rdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdg"))
        .args(args)
        .output()
        .expect("spawn rdg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        n_gaussians: 40,
        resolution: 24,
        n_train: 2,
        n_eval: 1,
        backdrop: Some(Backdrop {
            cols: 4,
            rows: 3,
            ..Backdrop::default()
        }),
        ..SceneSpec::default()
    }
}

/// Writes the spec and synthesizes a scene into `<tmp>/scene`.
fn synth(tmp: &Path) -> PathBuf {
    let spec = tmp.join("spec.json");
    fs::write(&spec, serde_json::to_string_pretty(&small_spec()).unwrap()).unwrap();
    let dir = tmp.join("scene");
    let o = rdg(&["synth", s(&spec), s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = synth(a.path());
    let db = synth(b.path());
    let fa = files(&da);
    assert!(fa.iter().any(|p| p.ends_with("train/001_coarse.pfm")));
    assert!(da.join("manifest.json").exists());
    for p in fa {
        let rel = p.strip_prefix(&da).unwrap();
        if rel == Path::new("manifest.json") {
            continue;
        }
        assert_eq!(
            fs::read(&p).unwrap(),
            fs::read(db.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

#[test]
fn missing_field_is_a_usage_error_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let mut spec = serde_json::to_value(small_spec()).unwrap();
    spec.as_object_mut().unwrap().remove("n_gaussians");
    let p = tmp.path().join("spec.json");
    fs::write(&p, spec.to_string()).unwrap();
    let o = rdg(&["synth", s(&p), s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_gaussians"), "{}", stderr(&o));
}

#[test]
fn overrides_reach_the_manifest_and_unknown_keys_fail() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, serde_json::to_string(&small_spec()).unwrap()).unwrap();
    let dir = tmp.path().join("scene");
    let o = rdg(&["synth", s(&spec), s(&dir), "--set", "seed=11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["seed"], 11);
    assert_eq!(m["argv"][0], "synth");

    let o = rdg(&["synth", s(&spec), s(&dir), "--set", "no_such.key=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&rdg(&["frobnicate"])), 1);
    assert_eq!(code(&rdg(&["eval"])), 1);
    assert_eq!(code(&rdg(&["--help"])), 0);
    let tmp = TempDir::new().unwrap();
    let o = rdg(&["eval", s(&tmp.path().join("nope.json")), s(tmp.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn refine_round_trip_and_failures() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path());
    let out = tmp.path().join("refined.pfm");
    let coarse = dir.join("train/000_coarse.pfm");
    let image = dir.join("train/000.png");
    let o = rdg(&["refine", s(&coarse), s(&image), s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let input = read_pfm(&coarse).unwrap();
    let refined = read_pfm(&out).unwrap();
    assert!(refined.same_shape(&input));
    let (lo, hi) = input.min_max();
    assert!(refined.data.iter().all(|&d| d.is_finite() && d >= lo && d <= hi));
    assert!(tmp.path().join("refined.pfm.manifest.json").exists());

    // Image from another resolution.
    let other = TempDir::new().unwrap();
    let mut big = small_spec();
    big.resolution = 32;
    let spec = other.path().join("spec.json");
    fs::write(&spec, serde_json::to_string(&big).unwrap()).unwrap();
    assert_eq!(code(&rdg(&["synth", s(&spec), s(&other.path().join("scene"))])), 0);
    let o = rdg(&[
        "refine",
        s(&coarse),
        s(&other.path().join("scene/train/000.png")),
        s(&out),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // Non-finite depth is a numerical failure.
    let mut bad: DepthMap = input.clone();
    bad.data[5] = f64::NAN;
    let bad_path = tmp.path().join("bad.pfm");
    write_pfm(&bad_path, &bad).unwrap();
    let o = rdg(&["refine", s(&bad_path), s(&image), s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn zero_step_training_matches_eval_of_the_initial_set() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path());
    let run = tmp.path().join("run");
    let o = rdg(&["train", s(&dir), s(&run), "--steps", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "model.json",
        "log.ndjson",
        "evals.json",
        "metrics.json",
        "manifest.json",
        "renders/eval_000.png",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trained = json(&run.join("metrics.json"));

    let out = tmp.path().join("init_metrics.json");
    let o = rdg(&["eval", s(&dir.join("init_set.json")), s(&dir), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&out)["mean"], trained["mean"]);
    assert_eq!(
        json(&run.join("model.json"))["gaussians"],
        json(&dir.join("init_set.json"))["gaussians"]
    );
}

#[test]
fn ground_truth_evaluates_to_its_own_images() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path());
    let o = rdg(&["eval", s(&dir.join("gt_set.json")), s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json(&dir.join("metrics.json"));
    // Stored images are 8-bit and depths f32, so only quantization remains.
    assert!(m["mean"]["psnr"].as_f64().unwrap() > 50.0, "{m}");
    assert!(m["mean"]["rmse"].as_f64().unwrap() < 1e-5, "{m}");
    assert!(m["mean"]["ssim"].as_f64().unwrap() > 0.999, "{m}");
}

#[test]
fn render_writes_requested_views() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path());
    let out = tmp.path().join("renders");
    let model = dir.join("gt_set.json");
    let cams = dir.join("cameras.json");
    let o = rdg(&[
        "render",
        s(&model),
        s(&cams),
        s(&out),
        "--split",
        "train",
        "--index",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("train_001.png").exists() && out.join("train_001.pfm").exists());
    assert!(!out.join("train_000.png").exists());
    assert!(out.join("render.manifest.json").exists());
    let d = read_pfm(&out.join("train_001.pfm")).unwrap();
    let gt = read_pfm(&dir.join("train/001_depth.pfm")).unwrap();
    assert_eq!(d, gt);

    assert_eq!(code(&rdg(&["render", s(&model), s(&cams), s(&out), "--index", "9"])), 1);
    assert_eq!(
        code(&rdg(&["render", s(&model), s(&cams), s(&out), "--split", "test"])),
        1
    );
}
