//! On-disk layout of a synthetic scene directory.
//!
//! ```text
//! scene.json          the scene spec
//! cameras.json        train and eval cameras, scene extent
//! gt_set.json         ground-truth primitives
//! init_set.json       initial primitives for training
//! train/NNN.png       ground-truth image
//! train/NNN_depth.pfm ground-truth depth
//! train/NNN_coarse.pfm corrupted depth
//! eval/NNN.png, eval/NNN_depth.pfm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rdg_core::io::{read_json, read_pfm, read_png, write_json, write_pfm, write_png};
use rdg_core::synth::{corrupt_depth, SyntheticScene, View};
use rdg_core::{Camera, DepthMap, GaussianSet, ImageBuffer};
use serde::{Deserialize, Serialize};

pub const DOC_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub schema_version: u32,
    pub scene_extent: f64,
    pub train: Vec<Camera>,
    pub eval: Vec<Camera>,
}

impl CameraRig {
    pub fn split(&self, name: &str) -> Result<&[Camera]> {
        match name {
            "train" => Ok(&self.train),
            "eval" => Ok(&self.eval),
            other => anyhow::bail!("unknown split '{other}' (expected train or eval)"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub schema_version: u32,
    pub gaussians: GaussianSet,
}

impl ModelDoc {
    pub fn new(gaussians: GaussianSet) -> Self {
        Self {
            schema_version: DOC_SCHEMA_VERSION,
            gaussians,
        }
    }
}

pub fn read_model(path: &Path) -> Result<GaussianSet> {
    let doc: ModelDoc = read_json(path, DOC_SCHEMA_VERSION)?;
    anyhow::ensure!(!doc.gaussians.is_empty(), "{}: model has no primitives", path.display());
    Ok(doc.gaussians)
}

pub fn view_stem(split: &str, i: usize) -> String {
    format!("{split}/{i:03}")
}

/// Write every file of the scene; returns the paths written.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for split in ["train", "eval"] {
        fs::create_dir_all(dir.join(split)).with_context(|| format!("creating {}", dir.join(split).display()))?;
    }
    put_json(dir, "scene.json", &scene.spec, &mut out)?;
    put_json(
        dir,
        "cameras.json",
        &CameraRig {
            schema_version: DOC_SCHEMA_VERSION,
            scene_extent: scene.scene_extent,
            train: scene.train.iter().map(|v| v.camera.clone()).collect(),
            eval: scene.eval.iter().map(|v| v.camera.clone()).collect(),
        },
        &mut out,
    )?;
    put_json(dir, "gt_set.json", &ModelDoc::new(scene.gt_set.clone()), &mut out)?;
    put_json(dir, "init_set.json", &ModelDoc::new(scene.init_set.clone()), &mut out)?;

    for (split, views) in [("train", &scene.train), ("eval", &scene.eval)] {
        for (i, v) in views.iter().enumerate() {
            let stem = dir.join(view_stem(split, i));
            let png = stem.with_extension("png");
            write_png(&png, &v.image)?;
            let depth = with_suffix(&stem, "_depth.pfm");
            write_pfm(&depth, &v.depth)?;
            out.extend([png, depth]);
            if split == "train" {
                let coarse = with_suffix(&stem, "_coarse.pfm");
                write_pfm(&coarse, &corrupt_depth(&v.depth, &scene.spec.corruption))?;
                out.push(coarse);
            }
        }
    }
    Ok(out)
}

fn put_json<T: Serialize>(dir: &Path, name: &str, value: &T, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    write_json(&p, value)?;
    out.push(p);
    Ok(())
}

pub fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A scene directory as read back for training and evaluation.
pub struct LoadedScene {
    pub rig: CameraRig,
    pub train: Vec<View>,
    pub coarse: Vec<DepthMap>,
    pub eval: Vec<View>,
    pub init_set: GaussianSet,
    pub inputs: Vec<PathBuf>,
}

fn load_view(dir: &Path, split: &str, i: usize, camera: &Camera, inputs: &mut Vec<PathBuf>) -> Result<View> {
    let stem = dir.join(view_stem(split, i));
    let png = stem.with_extension("png");
    let pfm = with_suffix(&stem, "_depth.pfm");
    let image: ImageBuffer = read_png(&png)?;
    let depth = read_pfm(&pfm)?;
    anyhow::ensure!(
        image.width == camera.width
            && image.height == camera.height
            && depth.width == image.width
            && depth.height == image.height,
        "{}: image/depth size does not match camera {}x{}",
        stem.display(),
        camera.width,
        camera.height
    );
    inputs.extend([png, pfm]);
    Ok(View {
        camera: camera.clone(),
        image,
        depth,
    })
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let mut inputs = Vec::new();
    let rig_path = dir.join("cameras.json");
    let rig: CameraRig = read_json(&rig_path, DOC_SCHEMA_VERSION)?;
    inputs.push(rig_path);
    let mut train = Vec::new();
    let mut coarse = Vec::new();
    for (i, cam) in rig.train.iter().enumerate() {
        train.push(load_view(dir, "train", i, cam, &mut inputs)?);
        let p = with_suffix(&dir.join(view_stem("train", i)), "_coarse.pfm");
        coarse.push(read_pfm(&p)?);
        inputs.push(p);
    }
    let eval = rig
        .eval
        .iter()
        .enumerate()
        .map(|(i, cam)| load_view(dir, "eval", i, cam, &mut inputs))
        .collect::<Result<_>>()?;
    let init_path = dir.join("init_set.json");
    let init_set = read_model(&init_path)?;
    inputs.push(init_path);
    Ok(LoadedScene {
        rig,
        train,
        coarse,
        eval,
        init_set,
        inputs,
    })
}

/// Eval views only, for `rdg eval`.
pub fn load_eval_views(dir: &Path) -> Result<(Vec<View>, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let rig_path = dir.join("cameras.json");
    let rig: CameraRig = read_json(&rig_path, DOC_SCHEMA_VERSION)?;
    inputs.push(rig_path);
    let views = rig
        .eval
        .iter()
        .enumerate()
        .map(|(i, cam)| load_view(dir, "eval", i, cam, &mut inputs))
        .collect::<Result<_>>()?;
    Ok((views, inputs))
}
