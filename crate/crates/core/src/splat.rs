//! Front-to-back alpha compositing of color and depth, and its analytic
//! backward pass.
//!
//! Per pixel, contributors are visited in global view-depth order and
//!
//! ```text
//! I_o   = Σ c_i a_i T_i        T_i = Π_{j<i} (1 - a_j)
//! D_raw = Σ d_i a_i T_i        a_i = min(0.99, α_i · G_i(pixel))
//! A     = Σ a_i T_i
//! D     = D_raw / max(A, ε)
//! ```
//!
//! where `G_i` is the projected 2D Gaussian falloff. Contributors with
//! `α_i · G_i < 1/255` are skipped and compositing stops once the
//! transmittance drops below 1e-4.

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussian::{build_covariance_backward, GaussianSet};
use crate::projection::{project_gaussian, project_gaussian_backward, Projected};
use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions with `α_i · G_i` below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Screen-space bounding box half-extent, in standard deviations.
pub const CULL_SIGMA: f64 = 3.0;
/// Floor on accumulated alpha when normalizing depth.
pub const DEPTH_NORM_EPS: f64 = 1e-6;
/// Rows per partial gradient buffer in the backward pass.
const BACKWARD_BAND: usize = 16;
/// Pixels per candidate bin within a row.
const ROW_BIN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("render tape was recorded for generation {recorded} with {recorded_len} primitives, set is generation {current} with {current_len}")]
    TapeMismatch {
        recorded: u64,
        current: u64,
        recorded_len: usize,
        current_len: usize,
    },
    #[error("cotangent buffers do not match the render resolution")]
    ShapeMismatch,
}

/// A visible primitive after projection.
#[derive(Clone, Debug)]
pub struct Splat {
    pub index: usize,
    pub proj: Projected,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    x_range: (f64, f64),
    y_range: (f64, f64),
    /// Exponents below this give alpha under [`ALPHA_MIN`] (with slack for
    /// rounding; the exact test follows).
    skip_power: f64,
}

impl Splat {
    #[inline]
    fn power(&self, px: f64, py: f64) -> f64 {
        let d = Vector2::new(px - self.proj.mean2d.x, py - self.proj.mean2d.y);
        -0.5 * (d.x * d.x * self.conic[(0, 0)] + 2.0 * d.x * d.y * self.conic[(0, 1)] + d.y * d.y * self.conic[(1, 1)])
    }
}

#[derive(Clone, Copy, Debug)]
struct TapeEntry {
    splat: u32,
    alpha: f64,
    falloff: f64,
    clamped: bool,
}

/// Saved compositing state needed by [`backward`].
#[derive(Clone, Debug)]
pub struct RenderTape {
    pub generation_tag: u64,
    pub n_primitives: usize,
    /// Visible primitives in compositing (front-to-back) order.
    pub splats: Vec<Splat>,
    offsets: Vec<usize>,
    entries: Vec<TapeEntry>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub depth_raw: DepthMap,
    /// Alpha-normalized depth; the depth every loss consumes.
    pub depth: DepthMap,
    pub acc_alpha: ScalarMap,
    pub tape: RenderTape,
}

impl RenderOutput {
    /// No primitive projected in front of the camera; all buffers are zero.
    pub fn is_empty_scene(&self) -> bool {
        self.tape.splats.is_empty()
    }

    /// `(primitive index, blending weight a_i·T_i)` of every contributor to
    /// pixel `(x, y)`, front to back.
    pub fn pixel_weights(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let p = y * self.image.width + x;
        let mut t = 1.0;
        self.tape.entries[self.tape.offsets[p]..self.tape.offsets[p + 1]]
            .iter()
            .map(|e| {
                let w = e.alpha * t;
                t *= 1.0 - e.alpha;
                (self.tape.splats[e.splat as usize].index, w)
            })
            .collect()
    }
}

/// Per-primitive gradients of a scalar loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub position: Vec<Vector3<f64>>,
    /// W.r.t. the stored (possibly unnormalized) quaternion.
    pub rotation: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Gradient w.r.t. the projected 2D mean, in pixels.
    pub mean2d: Vec<Vector2<f64>>,
    /// Whether the primitive was visible in the render.
    pub visible: Vec<bool>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Accumulate `other` into `self` (per-view gradients of a summed loss).
    pub fn accumulate(&mut self, other: &GradientSet) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.rotation[i] += other.rotation[i];
            self.log_scale[i] += other.log_scale[i];
            self.opacity_logit[i] += other.opacity_logit[i];
            self.color[i] += other.color[i];
            self.mean2d[i] += other.mean2d[i];
            self.visible[i] |= other.visible[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn project_visible(set: &GaussianSet, cam: &Camera) -> Vec<Splat> {
    let w = cam.width as f64;
    let h = cam.height as f64;
    let mut splats: Vec<Splat> = set
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(index, prim)| {
            let proj = project_gaussian(prim, cam).ok()?;
            if proj.view_depth <= 0.5 * cam.near {
                return None;
            }
            let conic = proj.cov2d.try_inverse()?;
            let rx = CULL_SIGMA * proj.cov2d[(0, 0)].sqrt();
            let ry = CULL_SIGMA * proj.cov2d[(1, 1)].sqrt();
            let x_range = (proj.mean2d.x - rx, proj.mean2d.x + rx);
            let y_range = (proj.mean2d.y - ry, proj.mean2d.y + ry);
            if x_range.1 < 0.0 || y_range.1 < 0.0 || x_range.0 > w - 1.0 || y_range.0 > h - 1.0 {
                return None;
            }
            Some(Splat {
                index,
                proj,
                conic,
                opacity: prim.opacity,
                color: prim.color,
                x_range,
                y_range,
                skip_power: (ALPHA_MIN / prim.opacity).ln() - 1e-9,
            })
        })
        .collect();
    splats.sort_by(|a, b| {
        a.proj
            .view_depth
            .total_cmp(&b.proj.view_depth)
            .then(a.index.cmp(&b.index))
    });
    splats
}

struct RowOut {
    color: Vec<f64>,
    depth_raw: Vec<f64>,
    acc: Vec<f64>,
    counts: Vec<usize>,
    entries: Vec<TapeEntry>,
}

fn render_row(splats: &[Splat], y: usize, width: usize) -> RowOut {
    let py = y as f64;
    let candidates: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| {
            let s = &splats[i as usize];
            s.y_range.0 <= py && py <= s.y_range.1
        })
        .collect();
    let mut out = RowOut {
        color: vec![0.0; width * 3],
        depth_raw: vec![0.0; width],
        acc: vec![0.0; width],
        counts: vec![0; width],
        entries: Vec::new(),
    };
    let mut bin = Vec::with_capacity(candidates.len());
    for x in 0..width {
        if x % ROW_BIN == 0 {
            let (lo, hi) = (x as f64, (x + ROW_BIN - 1).min(width - 1) as f64);
            bin.clear();
            bin.extend(candidates.iter().copied().filter(|&i| {
                let s = &splats[i as usize];
                s.x_range.0 <= hi && lo <= s.x_range.1
            }));
        }
        let px = x as f64;
        let mut t = 1.0;
        let mut rgb = Vector3::zeros();
        let mut depth = 0.0;
        let before = out.entries.len();
        for &si in &bin {
            let s = &splats[si as usize];
            if px < s.x_range.0 || px > s.x_range.1 {
                continue;
            }
            let power = s.power(px, py);
            if power < s.skip_power {
                continue;
            }
            let falloff = power.exp();
            let raw = s.opacity * falloff;
            if raw < ALPHA_MIN {
                continue;
            }
            let clamped = raw > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            let w = alpha * t;
            rgb += s.color * w;
            depth += s.proj.view_depth * w;
            out.entries.push(TapeEntry {
                splat: si,
                alpha,
                falloff,
                clamped,
            });
            t *= 1.0 - alpha;
            if t < TRANSMITTANCE_CUTOFF {
                break;
            }
        }
        out.color[x * 3..x * 3 + 3].copy_from_slice(rgb.as_slice());
        out.depth_raw[x] = depth;
        out.acc[x] = 1.0 - t;
        out.counts[x] = out.entries.len() - before;
    }
    out
}

#[inline]
pub fn normalize_depth(raw: f64, acc: f64) -> f64 {
    raw / acc.max(DEPTH_NORM_EPS)
}

/// Composite an already sorted, clamped and thresholded list of
/// `(alpha, color, depth)` contributors. Returns `(color, depth_raw, acc)`.
pub fn composite(contributors: &[(f64, Vector3<f64>, f64)]) -> (Vector3<f64>, f64, f64) {
    let mut t = 1.0;
    let mut rgb = Vector3::zeros();
    let mut depth = 0.0;
    for &(alpha, color, d) in contributors {
        rgb += color * (alpha * t);
        depth += d * alpha * t;
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (rgb, depth, 1.0 - t)
}

/// Composite `set` as seen by `cam`.
///
/// A set with nothing in front of the camera yields all-zero buffers with
/// `acc_alpha = 0` (see [`RenderOutput::is_empty_scene`]).
pub fn render(set: &GaussianSet, cam: &Camera) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let splats = project_visible(set, cam);
    let rows: Vec<RowOut> = (0..height)
        .into_par_iter()
        .map(|y| render_row(&splats, y, width))
        .collect();

    let mut image = Vec::with_capacity(width * height * 3);
    let mut depth_raw = Vec::with_capacity(width * height);
    let mut acc = Vec::with_capacity(width * height);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for row in rows {
        image.extend_from_slice(&row.color);
        depth_raw.extend_from_slice(&row.depth_raw);
        acc.extend_from_slice(&row.acc);
        for c in row.counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
        }
        entries.extend(row.entries);
    }
    let depth: Vec<f64> = depth_raw
        .iter()
        .zip(&acc)
        .map(|(&d, &a)| normalize_depth(d, a))
        .collect();

    RenderOutput {
        image: ImageBuffer::from_vec(width, height, image),
        depth_raw: ScalarMap::from_vec(width, height, depth_raw),
        depth: ScalarMap::from_vec(width, height, depth),
        acc_alpha: ScalarMap::from_vec(width, height, acc),
        tape: RenderTape {
            generation_tag: set.generation_tag,
            n_primitives: set.len(),
            splats,
            offsets,
            entries,
        },
    }
}

/// Screen-space gradient accumulator of one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl std::ops::AddAssign for SplatGrad {
    fn add_assign(&mut self, o: Self) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Gradients of `L = Σ_p ⟨dL_dimage(p), I_o(p)⟩ + dL_ddepth(p)·D(p)` w.r.t.
/// every primitive parameter.
pub fn backward(
    out: &RenderOutput,
    set: &GaussianSet,
    cam: &Camera,
    d_image: &ImageBuffer,
    d_depth: &DepthMap,
) -> Result<GradientSet, SplatError> {
    let tape = &out.tape;
    if tape.generation_tag != set.generation_tag || tape.n_primitives != set.len() {
        return Err(SplatError::TapeMismatch {
            recorded: tape.generation_tag,
            current: set.generation_tag,
            recorded_len: tape.n_primitives,
            current_len: set.len(),
        });
    }
    if !d_image.same_shape(&out.image) || !d_depth.same_shape(&out.depth) {
        return Err(SplatError::ShapeMismatch);
    }
    let (width, height) = (out.image.width, out.image.height);
    let n_splats = tape.splats.len();

    // Fixed row bands keep the reduction order independent of thread count.
    let bands: Vec<Vec<SplatGrad>> = (0..height.div_ceil(BACKWARD_BAND))
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![SplatGrad::default(); n_splats];
            let mut trans = Vec::new();
            let rows = band * BACKWARD_BAND..((band + 1) * BACKWARD_BAND).min(height);
            for (y, x) in rows.flat_map(|y| (0..width).map(move |x| (y, x))) {
                let p = y * width + x;
                let entries = &tape.entries[tape.offsets[p]..tape.offsets[p + 1]];
                if entries.is_empty() {
                    continue;
                }
                let g_rgb = Vector3::new(d_image.data[p * 3], d_image.data[p * 3 + 1], d_image.data[p * 3 + 2]);
                let g_d = d_depth.data[p];
                let a_acc = out.acc_alpha.data[p];
                let (g_raw, g_acc) = if a_acc > DEPTH_NORM_EPS {
                    (g_d / a_acc, -g_d * out.depth_raw.data[p] / (a_acc * a_acc))
                } else {
                    (g_d / DEPTH_NORM_EPS, 0.0)
                };
                if g_rgb == Vector3::zeros() && g_raw == 0.0 && g_acc == 0.0 {
                    continue;
                }

                trans.clear();
                let mut t = 1.0;
                for e in entries {
                    trans.push(t);
                    t *= 1.0 - e.alpha;
                }

                let (px, py) = (x as f64, y as f64);
                let mut behind = 0.0;
                for (k, e) in entries.iter().enumerate().rev() {
                    let s = &tape.splats[e.splat as usize];
                    let t_k = trans[k];
                    let value = g_rgb.dot(&s.color) + g_raw * s.proj.view_depth + g_acc;
                    let w = e.alpha * t_k;
                    let d_alpha = t_k * value - behind / (1.0 - e.alpha);
                    behind += value * w;

                    let g = &mut acc[e.splat as usize];
                    g.color += g_rgb * w;
                    g.depth += g_raw * w;
                    if e.clamped {
                        continue;
                    }
                    g.opacity += d_alpha * e.falloff;
                    let d_falloff = d_alpha * s.opacity;
                    let delta = Vector2::new(px - s.proj.mean2d.x, py - s.proj.mean2d.y);
                    let gf = d_falloff * e.falloff;
                    g.mean += (s.conic * delta) * gf;
                    g.conic += delta * delta.transpose() * (-0.5 * gf);
                }
            }
            acc
        })
        .collect();

    let mut totals = vec![SplatGrad::default(); n_splats];
    for row in bands {
        for (t, g) in totals.iter_mut().zip(row) {
            *t += g;
        }
    }

    let mut grads = GradientSet::zeros(set.len());
    for (s, g) in tape.splats.iter().zip(&totals) {
        let i = s.index;
        let prim = &set.primitives[i];
        let d_cov2d = -(s.conic * g.conic * s.conic);
        let pg = project_gaussian_backward(&s.proj, cam, &g.mean, &d_cov2d, g.depth);
        let (d_rot, d_log_scale) = build_covariance_backward(prim, &pg.cov3d);
        grads.position[i] = pg.position;
        grads.rotation[i] = d_rot;
        grads.log_scale[i] = d_log_scale;
        grads.opacity_logit[i] = g.opacity * s.opacity * (1.0 - s.opacity);
        grads.color[i] = g.color;
        grads.mean2d[i] = g.mean;
        grads.visible[i] = true;
    }
    Ok(grads)
}
