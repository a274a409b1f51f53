//! Growth and pruning of the Gaussian set.
//!
//! Two mechanisms run at every densification event:
//!
//! - screen-gradient driven clone/split and opacity pruning, and
//! - error-driven ray sampling: patches whose depth loss exceeds the mean
//!   patch loss get new primitives spread along the ray through their center.
//!
//! Opacity resets are scheduled independently of the densification interval.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::raster::{ImageBuffer, ScalarMap};
use crate::splat::GradientSet;

/// Depth interval new primitives are spread over along a sampled ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaySampleRange {
    /// The camera's `[near, far]`.
    Camera,
    /// The range of rendered depth inside the selected patch, widened by
    /// half its extent on both sides and clipped to `[near, far]`.
    PatchDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub interval: u64,
    pub k_samples: usize,
    pub grad_threshold: f64,
    pub opacity_reset_steps: Vec<u64>,
    pub opacity_reset_value: f64,
    pub prune_opacity: f64,
    /// Primitives whose largest scale exceeds this fraction of the scene
    /// extent are split rather than cloned.
    pub split_scale_fraction: f64,
    pub split_samples: usize,
    pub split_scale_divisor: f64,
    /// No clone/split after this step.
    pub densify_until: u64,
    /// Ray sampling runs from this step on.
    pub adaptive_from: u64,
    pub ray_range: RaySampleRange,
    pub sample_opacity: f64,
    /// Clone/split never grow the set past this size; the primitives with
    /// the largest gradients are densified first.
    pub max_primitives: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            k_samples: 8,
            grad_threshold: 0.0002,
            opacity_reset_steps: vec![1000, 3000],
            opacity_reset_value: 0.04,
            prune_opacity: 0.005,
            split_scale_fraction: 0.01,
            split_samples: 2,
            split_scale_divisor: 1.6,
            densify_until: 15_000,
            adaptive_from: 1000,
            ray_range: RaySampleRange::Camera,
            sample_opacity: 0.1,
            max_primitives: 1000,
        }
    }
}

/// Per-patch depth losses with the mean threshold and the patches above it.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPatchMap {
    pub losses: ScalarMap,
    pub threshold: f64,
    /// Row-major patch indices with loss strictly above the threshold.
    pub selected: Vec<usize>,
}

pub fn select_error_patches(per_patch_loss: &ScalarMap) -> ErrorPatchMap {
    let threshold = per_patch_loss.mean();
    let (lo, hi) = per_patch_loss.min_max();
    // A uniform field selects nothing even if the mean rounds below it.
    let selected = if per_patch_loss.is_empty() || lo == hi {
        Vec::new()
    } else {
        (0..per_patch_loss.len())
            .filter(|&i| per_patch_loss.data[i] > threshold)
            .collect()
    };
    ErrorPatchMap {
        losses: per_patch_loss.clone(),
        threshold,
        selected,
    }
}

/// `k` depths spaced linearly over `[near, far]` inclusive; `k = 1` gives the
/// midpoint.
pub fn ray_depths(near: f64, far: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.5 * (near + far)],
        _ => (0..k)
            .map(|i| near + (far - near) * i as f64 / (k - 1) as f64)
            .collect(),
    }
}

/// Integer pixel at the center of patch `index` of a grid with `cols` columns.
pub fn patch_center(index: usize, cols: usize, patch_px: usize) -> (usize, usize) {
    let (pc, pr) = (index % cols, index / cols);
    (pc * patch_px + patch_px / 2, pr * patch_px + patch_px / 2)
}

/// Mean distance from `p` to its three nearest primitives (fewer if the set
/// is smaller). `None` for an empty set.
fn local_spacing(existing: &[GaussianPrimitive], p: &Vector3<f64>) -> Option<f64> {
    let mut best = [f64::INFINITY; 3];
    for q in existing {
        let d = (q.position - p).norm();
        if d < best[2] {
            best[2] = d;
            best.sort_by(f64::total_cmp);
        }
    }
    let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
    (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64)
}

/// Everything ray sampling needs from one training view.
pub struct SampleView<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuffer,
    pub errors: &'a ErrorPatchMap,
    pub patch_px: usize,
    /// Rendered depth, used by [`RaySampleRange::PatchDepth`].
    pub rendered_depth: Option<&'a ScalarMap>,
}

/// New primitives on the rays through the centers of the selected patches.
pub fn sample_along_rays(
    view: &SampleView<'_>,
    existing: &[GaussianPrimitive],
    range: RaySampleRange,
    k: usize,
    opacity: f64,
) -> Vec<GaussianPrimitive> {
    let cam = view.camera;
    let cols = view.errors.losses.width;
    let mut out = Vec::with_capacity(view.errors.selected.len() * k);
    for &s in &view.errors.selected {
        let (u, v) = patch_center(s, cols, view.patch_px);
        if u >= cam.width || v >= cam.height {
            continue;
        }
        let (near, far) = match (range, view.rendered_depth) {
            (RaySampleRange::PatchDepth, Some(depth)) => patch_depth_range(depth, s, cols, view.patch_px, cam),
            _ => (cam.near, cam.far),
        };
        let color = view.image.pixel(u, v);
        for z in ray_depths(near, far, k) {
            let position = cam.unproject(u as f64, v as f64, z);
            // Fallback spacing: one pixel footprint at this depth.
            let scale = local_spacing(existing, &position).unwrap_or(z / cam.fx).max(1e-6);
            out.push(GaussianPrimitive::isotropic(
                position,
                scale,
                opacity,
                Vector3::from(color),
            ));
        }
    }
    out
}

fn patch_depth_range(depth: &ScalarMap, index: usize, cols: usize, p: usize, cam: &Camera) -> (f64, f64) {
    let (pc, pr) = (index % cols, index / cols);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in pr * p..((pr + 1) * p).min(depth.height) {
        for x in pc * p..((pc + 1) * p).min(depth.width) {
            let d = depth.get(x, y);
            if d > 0.0 {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    if !lo.is_finite() {
        return (cam.near, cam.far);
    }
    let margin = 0.5 * (hi - lo);
    let near = (lo - margin).max(cam.near);
    let far = (hi + margin).min(cam.far);
    if far > near {
        (near, far)
    } else {
        (cam.near, cam.far)
    }
}

/// Append `new` to `set` and bump its generation.
pub fn merge(set: &mut GaussianSet, new: Vec<GaussianPrimitive>) {
    set.primitives.extend(new);
    set.bump_generation();
}

/// Running mean of screen-space gradient norms per primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Record one view's gradients. Pixel gradients are converted to
    /// normalized device coordinates so thresholds do not depend on
    /// resolution.
    pub fn record(&mut self, grads: &GradientSet, cam: &Camera) {
        assert_eq!(grads.len(), self.accum.len());
        let sx = 0.5 * cam.width as f64;
        let sy = 0.5 * cam.height as f64;
        for i in 0..grads.len() {
            if grads.visible[i] {
                let g: Vector2<f64> = grads.mean2d[i];
                self.accum[i] += (g.x * sx).hypot(g.y * sy);
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

/// Bookkeeping of one [`schedule_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    /// For every primitive of the new set, the index it came from in the
    /// old set when its parameters (and optimizer state) carry over.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub sampled: usize,
    pub opacity_reset: bool,
    pub densified: bool,
}

/// Scene-level context for one densification event.
pub struct DensifyContext<'a> {
    pub scene_extent: f64,
    /// Views to run error-driven sampling on (empty to skip it).
    pub views: &'a [SampleView<'a>],
    pub seed: u64,
}

/// One scheduler tick at step `t`. Returns what changed; the set is rebuilt
/// in place and its generation bumped whenever membership changes.
pub fn schedule_step(
    set: &mut GaussianSet,
    stats: &GradStats,
    t: u64,
    cfg: &DensifyConfig,
    ctx: &DensifyContext<'_>,
) -> DensifyOutcome {
    let n = set.len();
    let mut outcome = DensifyOutcome {
        origin: (0..n).map(Some).collect(),
        ..Default::default()
    };
    let event = t > 0 && cfg.interval > 0 && t % cfg.interval == 0;
    if event {
        outcome.densified = true;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut kept: Vec<(GaussianPrimitive, Option<usize>)> = Vec::with_capacity(n);
        let mut extra: Vec<GaussianPrimitive> = Vec::new();
        let grow = t <= cfg.densify_until && n < cfg.max_primitives && stats.accum.len() == n;
        let split_limit = cfg.split_scale_fraction * ctx.scene_extent;
        let mut hot = vec![false; n];
        if grow {
            // Largest gradients first until the size cap is met.
            let mut order: Vec<usize> = (0..n).filter(|&i| stats.mean(i) > cfg.grad_threshold).collect();
            order.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
            let mut size = n;
            for i in order {
                let added = if set.primitives[i].scale().max() > split_limit {
                    cfg.split_samples.saturating_sub(1)
                } else {
                    1
                };
                if size + added > cfg.max_primitives {
                    continue;
                }
                size += added;
                hot[i] = true;
            }
        }
        for (i, prim) in set.primitives.iter().enumerate() {
            let hot = hot[i];
            if hot && prim.scale().max() > split_limit {
                outcome.split += 1;
                let r = prim.rotation_matrix();
                let s = prim.scale();
                for _ in 0..cfg.split_samples {
                    let z = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    let mut child = prim.clone();
                    child.position += r * s.component_mul(&z);
                    child.log_scale -= Vector3::repeat(cfg.split_scale_divisor.ln());
                    extra.push(child);
                }
                continue;
            }
            if hot {
                outcome.cloned += 1;
                extra.push(prim.clone());
            }
            kept.push((prim.clone(), Some(i)));
        }
        kept.extend(extra.into_iter().map(|p| (p, None)));
        let before_prune = kept.len();
        kept.retain(|(p, _)| p.opacity >= cfg.prune_opacity);
        outcome.pruned = before_prune - kept.len();

        let mut primitives: Vec<GaussianPrimitive> = Vec::with_capacity(kept.len());
        outcome.origin.clear();
        for (p, o) in kept {
            primitives.push(p);
            outcome.origin.push(o);
        }
        if t >= cfg.adaptive_from && cfg.k_samples > 0 {
            for view in ctx.views {
                let new = sample_along_rays(view, &primitives, cfg.ray_range, cfg.k_samples, cfg.sample_opacity);
                outcome.sampled += new.len();
                outcome.origin.extend(std::iter::repeat_n(None, new.len()));
                primitives.extend(new);
            }
        }
        set.primitives = primitives;
        set.bump_generation();
    }
    if cfg.opacity_reset_steps.contains(&t) {
        for p in &mut set.primitives {
            p.opacity = cfg.opacity_reset_value;
        }
        outcome.opacity_reset = true;
    }
    outcome
}
