//! The optimization loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densify::{
    schedule_step, select_error_patches, DensifyConfig, DensifyContext, ErrorPatchMap, GradStats, SampleView,
};
use crate::gaussian::GaussianSet;
use crate::guidance::{rdg_for_view, schedule_value, GuidanceError, GuidanceParams};
use crate::losses::{
    color_loss, local_depth_loss, metrics, pearson_loss, total_loss, LossError, LossParts, LossReport, LossWeights,
    Metrics,
};
use crate::optim::{Adam, LearningRates};
use crate::raster::{DepthMap, ImageBuffer, ScalarMap};
use crate::refine::{refine, EnergyParams, RefineError};
use crate::splat::{backward, render, GradientSet, SplatError};
use crate::synth::View;
use crate::Camera;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Refine(#[from] RefineError),
}

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub total_steps: u64,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub guidance: GuidanceParams,
    pub energy_coarse: EnergyParams,
    pub energy_fine: EnergyParams,
    pub densify: DensifyConfig,
    pub seed: u64,
    /// Pearson and patch-normalized depth losses against the refined depth.
    pub enable_depth: bool,
    /// Relative depth guidance.
    pub enable_rdg: bool,
    /// Error-driven ray sampling at densification events.
    pub enable_adaptive_sampling: bool,
    /// Supervise with the coarse depth instead of refining it first.
    pub skip_refinement: bool,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            total_steps: 6000,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            guidance: GuidanceParams::default(),
            energy_coarse: EnergyParams::coarse(),
            energy_fine: EnergyParams::fine(),
            densify: DensifyConfig::default(),
            seed: 0,
            enable_depth: true,
            enable_rdg: true,
            enable_adaptive_sampling: true,
            skip_refinement: false,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    /// Plain photometric optimization with the inherited densification.
    pub fn baseline() -> Self {
        Self {
            enable_depth: false,
            enable_rdg: false,
            enable_adaptive_sampling: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.total_steps > 0 && self.total_steps < self.loss.depth_warmup && (self.enable_depth || self.enable_rdg) {
            log::warn!(
                "total_steps {} below depth_warmup {}: depth terms never engage",
                self.total_steps,
                self.loss.depth_warmup
            );
        }
        let lr = &self.lr;
        if [lr.position, lr.opacity, lr.scale, lr.rotation, lr.color]
            .iter()
            .any(|&r| !(r >= 0.0))
        {
            return bad("learning rates must be non-negative");
        }
        if !(self.guidance.b0 > 0.0 && self.guidance.b0 < 1.0) || self.guidance.horizon == 0 {
            return bad("guidance b0 must be in (0, 1) and horizon at least 1");
        }
        if self.guidance.patch_px == 0 || self.densify.interval == 0 {
            return bad("patch size and densify interval must be at least 1");
        }
        self.energy_coarse.validate()?;
        self.energy_fine.validate()?;
        Ok(())
    }

    fn needs_depth_prior(&self) -> bool {
        self.enable_depth || self.enable_adaptive_sampling
    }
}

/// A training view: camera, ground-truth image and depth prior.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageBuffer,
    /// `D_r` (or `D_c` when refinement is skipped). `None` disables the depth
    /// terms for this view.
    pub prior_depth: Option<DepthMap>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainView>,
    pub eval: Vec<View>,
    pub scene_extent: f64,
}

/// Build training views, refining each coarse depth once up front.
pub fn prepare_views(
    train: &[View],
    coarse_depths: &[DepthMap],
    cfg: &TrainConfig,
) -> Result<Vec<TrainView>, TrainError> {
    if coarse_depths.len() != train.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} coarse depths for {} training views",
            coarse_depths.len(),
            train.len()
        )));
    }
    let priors: Vec<Option<DepthMap>> = if !cfg.needs_depth_prior() {
        vec![None; train.len()]
    } else if cfg.skip_refinement {
        coarse_depths.iter().cloned().map(Some).collect()
    } else {
        train
            .par_iter()
            .zip(coarse_depths)
            .map(|(v, d)| refine(d, &v.image, &cfg.energy_coarse, &cfg.energy_fine).map(Some))
            .collect::<Result<_, _>>()?
    };
    Ok(train
        .iter()
        .zip(priors)
        .map(|(v, prior_depth)| TrainView {
            camera: v.camera.clone(),
            image: v.image.clone(),
            prior_depth,
        })
        .collect())
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean over training views.
    pub losses: LossReport,
    pub primitive_count: usize,
    pub b: f64,
    pub omega: f64,
}

pub struct TrainState {
    pub step: u64,
    pub set: GaussianSet,
    pub adam: Adam,
    pub b: f64,
    pub omega: f64,
    pub stats: GradStats,
    pub history: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(set: GaussianSet, cfg: &TrainConfig) -> Self {
        let n = set.len();
        Self {
            step: 0,
            set,
            adam: Adam::new(n),
            b: cfg.guidance.b0,
            omega: cfg.loss.omega0,
            stats: GradStats::new(n),
            history: Vec::new(),
        }
    }
}

struct ViewResult {
    report: LossReport,
    grads: GradientSet,
    per_patch: Option<ScalarMap>,
    depth: DepthMap,
}

fn view_step(
    set: &GaussianSet,
    view: &TrainView,
    cfg: &TrainConfig,
    t: u64,
    b: f64,
    omega: f64,
    want_patches: bool,
) -> Result<ViewResult, TrainError> {
    let w = &cfg.loss;
    let active = t > w.depth_warmup;
    let out = render(set, &view.camera);
    let cl = color_loss(&out.image, &view.image, w.beta)?;
    let mut d_image = cl.grad;
    let mut d_depth = ScalarMap::zeros(out.depth.width, out.depth.height);
    let mut parts = LossParts {
        l_color: cl.value,
        ..Default::default()
    };

    if let Some(prior) = &view.prior_depth {
        let depth_on = active && cfg.enable_depth;
        if depth_on || want_patches {
            let ll = local_depth_loss(prior, &out.depth, cfg.guidance.patch_px, w.epsilon)?;
            if depth_on {
                let pg = pearson_loss(prior, &out.depth, w.epsilon)?;
                parts.l_g = Some(pg.value);
                parts.l_l = Some(ll.value);
                for ((d, a), b) in d_depth.data.iter_mut().zip(&pg.grad.data).zip(&ll.grad.data) {
                    *d += a + w.lambda * b;
                }
            }
            parts.per_patch_depth = Some(ll.per_patch);
        }
    }
    if active && cfg.enable_rdg {
        let g = rdg_for_view(&out.image, &out.depth, b, &cfg.guidance)?;
        parts.l_rdg = Some(g.value);
        for (d, a) in d_image.data.iter_mut().zip(&g.d_image.data) {
            *d += omega * a;
        }
        if let Some(dd) = g.d_depth {
            for (d, a) in d_depth.data.iter_mut().zip(&dd.data) {
                *d += omega * a;
            }
        }
    }
    let report = total_loss(&parts, w, omega, t);
    let grads = backward(&out, set, &view.camera, &d_image, &d_depth)?;
    Ok(ViewResult {
        per_patch: report.per_patch_depth.clone(),
        report,
        grads,
        depth: out.depth,
    })
}

fn mean_option(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    LossReport {
        l_color: reports.iter().map(|r| r.l_color).sum::<f64>() / n,
        l_g: mean_option(reports.iter().map(|r| r.l_g)),
        l_l: mean_option(reports.iter().map(|r| r.l_l)),
        l_depth: mean_option(reports.iter().map(|r| r.l_depth)),
        l_rdg: mean_option(reports.iter().map(|r| r.l_rdg)),
        omega: reports[0].omega,
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        per_patch_depth: None,
    }
}

fn report_is_finite(r: &LossReport) -> bool {
    [Some(r.l_color), r.l_g, r.l_l, r.l_depth, r.l_rdg, Some(r.total)]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
}

/// Advance `state` by one optimization step over all training views.
pub fn train_step(
    state: &mut TrainState,
    views: &[TrainView],
    cfg: &TrainConfig,
    scene_extent: f64,
) -> Result<LogRecord, TrainError> {
    if views.is_empty() {
        return Err(TrainError::InvalidConfig("no training views".into()));
    }
    let t = state.step + 1;
    let (b, omega) = (state.b, state.omega);
    let dens = &cfg.densify;
    let densify_event = t % dens.interval == 0;
    let want_patches = cfg.enable_adaptive_sampling && densify_event && t >= dens.adaptive_from;

    let results: Vec<ViewResult> = views
        .par_iter()
        .map(|v| view_step(&state.set, v, cfg, t, b, omega, want_patches))
        .collect::<Result<_, _>>()?;

    let reports: Vec<LossReport> = results.iter().map(|r| r.report.clone()).collect();
    for (k, r) in reports.iter().enumerate() {
        if !report_is_finite(r) || !results[k].grads.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: t,
                detail: format!(
                    "view {k}: l_color={} l_g={:?} l_l={:?} l_rdg={:?} total={} gradients finite={}",
                    r.l_color,
                    r.l_g,
                    r.l_l,
                    r.l_rdg,
                    r.total,
                    results[k].grads.is_finite()
                ),
            });
        }
    }

    let n = state.set.len();
    let scale = 1.0 / views.len() as f64;
    let mut grads = GradientSet::zeros(n);
    for (r, v) in results.iter().zip(views) {
        grads.accumulate(&r.grads);
        state.stats.record(&r.grads, &v.camera);
    }
    for i in 0..n {
        grads.position[i] *= scale;
        grads.rotation[i] *= scale;
        grads.log_scale[i] *= scale;
        grads.opacity_logit[i] *= scale;
        grads.color[i] *= scale;
    }
    state.adam.step(&mut state.set, &grads, &cfg.lr);

    let error_maps: Vec<Option<ErrorPatchMap>> = results
        .iter()
        .map(|r| r.per_patch.as_ref().filter(|_| want_patches).map(select_error_patches))
        .collect();
    let sample_views: Vec<SampleView<'_>> = views
        .iter()
        .zip(&error_maps)
        .zip(&results)
        .filter_map(|((v, e), r)| {
            e.as_ref().map(|errors| SampleView {
                camera: &v.camera,
                image: &v.image,
                errors,
                patch_px: cfg.guidance.patch_px,
                rendered_depth: Some(&r.depth),
            })
        })
        .collect();
    let ctx = DensifyContext {
        scene_extent,
        views: &sample_views,
        seed: cfg.seed,
    };
    let outcome = schedule_step(&mut state.set, &state.stats, t, dens, &ctx);
    if outcome.densified {
        state.adam.remap(&outcome.origin);
        state.stats = GradStats::new(state.set.len());
        log::debug!(
            "step {t}: cloned {} split {} pruned {} sampled {} -> {} primitives",
            outcome.cloned,
            outcome.split,
            outcome.pruned,
            outcome.sampled,
            state.set.len()
        );
    }
    if outcome.opacity_reset {
        state.adam.reset_opacity();
    }

    let record = LogRecord {
        step: t,
        losses: mean_report(&reports),
        primitive_count: state.set.len(),
        b,
        omega,
    };
    state.b = schedule_value(cfg.guidance.schedule, cfg.guidance.b0, state.b, t, cfg.guidance.horizon);
    state.omega = schedule_value(cfg.guidance.schedule, cfg.loss.omega0, state.omega, t, cfg.loss.horizon);
    state.step = t;
    state.history.push(record.clone());
    Ok(record)
}

/// Metrics of `set` on every view: PSNR/SSIM of the image, RMSE of the
/// rendered depth against the ground-truth depth.
pub fn evaluate(set: &GaussianSet, views: &[View]) -> Result<Vec<Metrics>, TrainError> {
    views
        .par_iter()
        .map(|v| {
            let out = render(set, &v.camera);
            Ok(metrics(&out.image, &v.image, &out.depth, &v.depth)?)
        })
        .collect()
}

pub fn mean_metrics(m: &[Metrics]) -> Metrics {
    let n = m.len().max(1) as f64;
    Metrics {
        psnr: m.iter().map(|x| x.psnr).sum::<f64>() / n,
        ssim: m.iter().map(|x| x.ssim).sum::<f64>() / n,
        rmse: m.iter().map(|x| x.rmse).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub per_view: Vec<Metrics>,
    pub mean: Metrics,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub set: GaussianSet,
    pub evals: Vec<EvalRecord>,
    pub log: Vec<LogRecord>,
}

impl FitResult {
    pub fn final_eval(&self) -> &EvalRecord {
        self.evals.last().expect("fit always evaluates at least once")
    }
}

/// Run `cfg.total_steps` steps from `init`, evaluating at step 0, every
/// `eval_interval` steps and at the end.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset, init: GaussianSet) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.eval.is_empty() {
        return Err(TrainError::InvalidConfig(
            "need at least one train and one eval view".into(),
        ));
    }
    let mut state = TrainState::new(init, cfg);
    let eval_at = |state: &TrainState| -> Result<EvalRecord, TrainError> {
        let per_view = evaluate(&state.set, &dataset.eval)?;
        Ok(EvalRecord {
            step: state.step,
            mean: mean_metrics(&per_view),
            per_view,
        })
    };
    let mut evals = vec![eval_at(&state)?];
    for _ in 0..cfg.total_steps {
        train_step(&mut state, &dataset.train, cfg, dataset.scene_extent)?;
        if cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0 {
            evals.push(eval_at(&state)?);
        }
    }
    if evals.last().map(|e| e.step) != Some(state.step) {
        evals.push(eval_at(&state)?);
    }
    Ok(FitResult {
        set: state.set,
        evals,
        log: state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianPrimitive;
    use crate::synth::{corrupt_depth, make_scene, Backdrop, SceneSpec};
    use nalgebra::Vector3;

    fn tiny_dataset(cfg: &TrainConfig) -> (Dataset, GaussianSet) {
        let spec = SceneSpec {
            n_gaussians: 40,
            resolution: 32,
            n_train: 2,
            n_eval: 1,
            backdrop: Some(Backdrop {
                cols: 4,
                rows: 3,
                ..Backdrop::default()
            }),
            ..SceneSpec::default()
        };
        let scene = make_scene(&spec).unwrap();
        let coarse: Vec<DepthMap> = scene
            .train
            .iter()
            .map(|v| corrupt_depth(&v.depth, &spec.corruption))
            .collect();
        let train = prepare_views(&scene.train, &coarse, cfg).unwrap();
        (
            Dataset {
                train,
                eval: scene.eval.clone(),
                scene_extent: scene.scene_extent,
            },
            scene.init_set,
        )
    }

    fn short(cfg: TrainConfig, steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            loss: LossWeights {
                depth_warmup: 5,
                ..LossWeights::default()
            },
            densify: DensifyConfig {
                interval: 10,
                adaptive_from: 5,
                opacity_reset_steps: vec![20],
                ..DensifyConfig::default()
            },
            eval_interval: 10,
            ..cfg
        }
    }

    #[test]
    fn zero_rates_keep_parameters_and_record_losses() {
        let mut cfg = short(TrainConfig::baseline(), 5);
        cfg.lr = LearningRates::zero();
        cfg.densify.interval = 1000;
        let (ds, init) = tiny_dataset(&cfg);
        let r = fit(&cfg, &ds, init.clone()).unwrap();
        assert_eq!(r.set, init);
        assert_eq!(r.log.len(), 5);
        assert!(r.log.windows(2).all(|w| w[0].losses.total == w[1].losses.total));
    }

    #[test]
    fn zero_steps_evaluates_initial_set() {
        let cfg = short(TrainConfig::baseline(), 0);
        let (ds, init) = tiny_dataset(&cfg);
        let r = fit(&cfg, &ds, init.clone()).unwrap();
        assert_eq!(r.evals.len(), 1);
        assert_eq!(r.final_eval().per_view, evaluate(&init, &ds.eval).unwrap());
    }

    #[test]
    fn depth_terms_gate_on_warmup() {
        let cfg = short(TrainConfig::default(), 7);
        let (ds, init) = tiny_dataset(&cfg);
        let r = fit(&cfg, &ds, init).unwrap();
        for rec in &r.log {
            let engaged = rec.step > 5;
            assert_eq!(rec.losses.l_depth.is_some(), engaged, "step {}", rec.step);
            assert_eq!(rec.losses.l_rdg.is_some(), engaged);
        }
    }

    #[test]
    fn fits_are_deterministic() {
        let cfg = short(TrainConfig::default(), 25);
        let (ds, init) = tiny_dataset(&cfg);
        let a = fit(&cfg, &ds, init.clone()).unwrap();
        let b = fit(&cfg, &ds, init).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.log, b.log);
        assert!(a.set.primitives.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn opacity_reset_is_exact() {
        let cfg = short(TrainConfig::default(), 20);
        let (ds, init) = tiny_dataset(&cfg);
        let r = fit(&cfg, &ds, init).unwrap();
        assert!(r.set.primitives.iter().all(|p| p.opacity == 0.04));
    }

    #[test]
    fn single_gaussian_color_loss_descends() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            0.8,
            24,
            24,
            0.5,
            10.0,
        );
        let target = GaussianSet::new(vec![GaussianPrimitive::isotropic(
            Vector3::new(0.05, -0.03, 0.0),
            0.2,
            0.8,
            Vector3::new(0.8, 0.3, 0.2),
        )]);
        let start = GaussianSet::new(vec![GaussianPrimitive::isotropic(
            Vector3::new(-0.05, 0.04, 0.1),
            0.15,
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
        )]);
        let views = vec![TrainView {
            camera: cam.clone(),
            image: render(&target, &cam).image,
            prior_depth: None,
        }];
        let cfg = TrainConfig::baseline();
        let mut state = TrainState::new(start, &cfg);
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut state, &views, &cfg, 1.0).unwrap().losses.l_color)
            .collect();
        assert!(losses[1] < losses[0], "{losses:?}");
        assert!(losses[49] < 0.7 * losses[0], "{losses:?}");
    }
}
