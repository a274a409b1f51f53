//! `rdg`: synthetic scenes, depth refinement, training, rendering and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

mod overrides;
mod scene;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rdg_core::io::{read_pfm, read_png, write_json, write_pfm, write_png, IoError, RunManifest};
use rdg_core::losses::Metrics;
use rdg_core::refine::{refine, EnergyParams, RefineError};
use rdg_core::render;
use rdg_core::synth::{make_scene, SceneSpec, SCENE_SCHEMA_VERSION};
use rdg_core::train::{
    evaluate, fit, mean_metrics, prepare_views, Dataset, EvalRecord, TrainConfig, TrainError, CONFIG_SCHEMA_VERSION,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::scene::{load_eval_views, load_scene, read_model, with_suffix, ModelDoc, DOC_SCHEMA_VERSION};

#[derive(Parser, Debug)]
#[command(name = "rdg", version, about = "Depth-guided Gaussian splatting on synthetic scenes")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Override a configuration value, e.g. `--set loss.lambda=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory from a scene spec.
    Synth {
        spec: PathBuf,
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Refine a coarse depth map against an image.
    Refine {
        depth: PathBuf,
        image: PathBuf,
        out: PathBuf,
        /// Energy parameters (`{"schema_version", "coarse", "fine"}`).
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train from a scene directory's initial set.
    Train {
        scene_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shorthand for `--set total_steps=N`.
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render a model from the cameras of a scene.
    Render {
        model: PathBuf,
        cameras: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Render only this camera of the split.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Metrics of a model on a scene's eval views.
    Eval {
        model: PathBuf,
        scene_dir: PathBuf,
        /// Defaults to `metrics.json` next to the model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineParams {
    schema_version: u32,
    #[serde(default = "EnergyParams::coarse")]
    coarse: EnergyParams,
    #[serde(default = "EnergyParams::fine")]
    fine: EnergyParams,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            schema_version: DOC_SCHEMA_VERSION,
            coarse: EnergyParams::coarse(),
            fine: EnergyParams::fine(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MetricsDoc {
    schema_version: u32,
    step: u64,
    per_view: Vec<Metrics>,
    mean: Metrics,
}

impl From<&EvalRecord> for MetricsDoc {
    fn from(e: &EvalRecord) -> Self {
        Self {
            schema_version: DOC_SCHEMA_VERSION,
            step: e.step,
            per_view: e.per_view.clone(),
            mean: e.mean,
        }
    }
}

/// Load `path` (or the defaults), apply overrides, parse into `T`.
fn load_config<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    default: T,
    version: u32,
    sets: &[String],
) -> Result<T> {
    let base: T = match path {
        Some(p) => rdg_core::io::read_json(p, version)?,
        None => default,
    };
    if sets.is_empty() {
        return Ok(base);
    }
    let mut doc = serde_json::to_value(&base)?;
    overrides::apply(&mut doc, sets)?;
    let text = serde_json::to_string_pretty(&doc)?;
    Ok(rdg_core::io::parse_json(Path::new("<overrides>"), &text, version)?)
}

struct Session {
    manifest: RunManifest,
    started: Instant,
}

impl Session {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let mut manifest = RunManifest::new(command, serde_json::to_value(config)?, seed);
        manifest.argv = std::env::args().skip(1).collect();
        Ok(Self {
            manifest,
            started: Instant::now(),
        })
    }

    fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.manifest
            .inputs
            .extend(paths.into_iter().map(|p| p.display().to_string()));
    }

    fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.manifest
            .outputs
            .extend(paths.into_iter().map(|p| p.display().to_string()));
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.elapsed_secs = self.started.elapsed().as_secs_f64();
        write_json(path, &self.manifest)?;
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(spec_path: &Path, out_dir: &Path, sets: &[String]) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| IoError::Io {
        path: spec_path.to_path_buf(),
        source: e,
    })?;
    let mut spec: SceneSpec = rdg_core::io::parse_json(spec_path, &text, SCENE_SCHEMA_VERSION)?;
    if !sets.is_empty() {
        spec = load_config(None, spec, SCENE_SCHEMA_VERSION, sets)?;
    }
    let mut session = Session::new("synth", &spec, Some(spec.seed))?;
    session.inputs([spec_path.to_path_buf()]);
    let scene = make_scene(&spec).map_err(|e| anyhow::anyhow!("{}: {e}", spec_path.display()))?;
    create_dir(out_dir)?;
    let written = scene::write_scene(out_dir, &scene)?;
    log::info!("wrote {} files to {}", written.len(), out_dir.display());
    session.outputs(written);
    session.finish(&out_dir.join("manifest.json"))
}

fn cmd_refine(depth: &Path, image: &Path, out: &Path, params: Option<&Path>, sets: &[String]) -> Result<()> {
    let params: RefineParams = load_config(params, RefineParams::default(), DOC_SCHEMA_VERSION, sets)?;
    let mut session = Session::new("refine", &params, None)?;
    let d = read_pfm(depth)?;
    let img = read_png(image)?;
    session.inputs([depth.to_path_buf(), image.to_path_buf()]);
    let refined = refine(&d, &img, &params.coarse, &params.fine)?;
    write_pfm(out, &refined)?;
    session.outputs([out.to_path_buf()]);
    session.finish(&with_suffix(out, ".manifest.json"))
}

fn write_renders(
    set: &rdg_core::GaussianSet,
    cams: &[rdg_core::Camera],
    split: &str,
    dir: &Path,
    only: Option<usize>,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        if only.is_some_and(|k| k != i) {
            continue;
        }
        let r = render(set, cam);
        let stem = dir.join(format!("{split}_{i:03}"));
        let png = stem.with_extension("png");
        let pfm = stem.with_extension("pfm");
        write_png(&png, &r.image)?;
        write_pfm(&pfm, &r.depth)?;
        out.extend([png, pfm]);
    }
    Ok(out)
}

fn cmd_train(
    scene_dir: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    steps: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let mut sets = sets.to_vec();
    if let Some(n) = steps {
        sets.push(format!("total_steps={n}"));
    }
    let cfg: TrainConfig = load_config(config, TrainConfig::default(), CONFIG_SCHEMA_VERSION, &sets)?;
    cfg.validate()?;
    let mut session = Session::new("train", &cfg, Some(cfg.seed))?;
    let loaded = load_scene(scene_dir)?;
    session.inputs(loaded.inputs.iter().cloned());
    if let Some(p) = config {
        session.inputs([p.to_path_buf()]);
    }
    create_dir(out_dir)?;

    let train = prepare_views(&loaded.train, &loaded.coarse, &cfg)?;
    let mut outputs = Vec::new();
    let prior_dir = out_dir.join("priors");
    for (i, v) in train.iter().enumerate() {
        if let Some(d) = &v.prior_depth {
            create_dir(&prior_dir)?;
            let p = prior_dir.join(format!("train_{i:03}.pfm"));
            write_pfm(&p, d)?;
            outputs.push(p);
        }
    }
    let dataset = Dataset {
        train,
        eval: loaded.eval,
        scene_extent: loaded.rig.scene_extent,
    };
    let result = fit(&cfg, &dataset, loaded.init_set)?;

    let model = out_dir.join("model.json");
    write_json(&model, &ModelDoc::new(result.set.clone()))?;
    let log_path = out_dir.join("log.ndjson");
    let mut log = Vec::new();
    for rec in &result.log {
        serde_json::to_writer(&mut log, rec)?;
        log.push(b'\n');
    }
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    let evals = out_dir.join("evals.json");
    write_json(&evals, &result.evals.iter().map(MetricsDoc::from).collect::<Vec<_>>())?;
    let metrics = out_dir.join("metrics.json");
    write_json(&metrics, &MetricsDoc::from(result.final_eval()))?;
    outputs.extend([model, log_path, evals, metrics]);
    outputs.extend(write_renders(
        &result.set,
        &loaded.rig.eval,
        "eval",
        &out_dir.join("renders"),
        None,
    )?);
    let m = result.final_eval().mean;
    println!(
        "step {}: psnr {:.3} ssim {:.4} rmse {:.4} ({} primitives)",
        result.final_eval().step,
        m.psnr,
        m.ssim,
        m.rmse,
        result.set.len()
    );
    session.outputs(outputs);
    session.finish(&out_dir.join("manifest.json"))
}

fn cmd_render(model: &Path, cameras: &Path, out_dir: &Path, split: &str, index: Option<usize>) -> Result<()> {
    let mut session = Session::new("render", &serde_json::json!({ "split": split, "index": index }), None)?;
    let set = read_model(model)?;
    let rig: scene::CameraRig = rdg_core::io::read_json(cameras, DOC_SCHEMA_VERSION)?;
    let cams = rig.split(split)?;
    if let Some(i) = index {
        anyhow::ensure!(
            i < cams.len(),
            "index {i} out of range: split '{split}' has {} cameras",
            cams.len()
        );
    }
    session.inputs([model.to_path_buf(), cameras.to_path_buf()]);
    let written = write_renders(&set, cams, split, out_dir, index)?;
    session.outputs(written);
    session.finish(&out_dir.join("render.manifest.json"))
}

fn cmd_eval(model: &Path, scene_dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut session = Session::new("eval", &serde_json::json!({}), None)?;
    let set = read_model(model)?;
    let (views, inputs) = load_eval_views(scene_dir)?;
    session.inputs(std::iter::once(model.to_path_buf()).chain(inputs));
    let per_view = evaluate(&set, &views)?;
    let doc = MetricsDoc {
        schema_version: DOC_SCHEMA_VERSION,
        step: 0,
        mean: mean_metrics(&per_view),
        per_view,
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).join("metrics.json"));
    write_json(&out, &doc)?;
    println!(
        "psnr {:.3} ssim {:.4} rmse {:.4}",
        doc.mean.psnr, doc.mean.ssim, doc.mean.rmse
    );
    session.outputs([out.clone()]);
    session.finish(&with_suffix(&out, ".manifest.json"))
}

/// The cause chain joined by `: `, skipping causes whose text the previous
/// message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    let mut last = out.clone();
    for cause in err.chain().skip(1) {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(TrainError::NonFiniteLoss { .. }) = cause.downcast_ref::<TrainError>() {
            return 2;
        }
        if let Some(TrainError::Refine(RefineError::NonFinite)) = cause.downcast_ref::<TrainError>() {
            return 2;
        }
        if let Some(RefineError::NonFinite) = cause.downcast_ref::<RefineError>() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            out_dir,
            overrides,
        } => cmd_synth(&spec, &out_dir, &overrides.sets),
        Command::Refine {
            depth,
            image,
            out,
            params,
            overrides,
        } => cmd_refine(&depth, &image, &out, params.as_deref(), &overrides.sets),
        Command::Train {
            scene_dir,
            out_dir,
            config,
            steps,
            overrides,
        } => cmd_train(&scene_dir, &out_dir, config.as_deref(), steps, &overrides.sets),
        Command::Render {
            model,
            cameras,
            out_dir,
            split,
            index,
        } => cmd_render(&model, &cameras, &out_dir, &split, index),
        Command::Eval { model, scene_dir, out } => cmd_eval(&model, &scene_dir, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // The environment is deliberately not consulted.
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
