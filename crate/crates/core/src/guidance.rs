//! Relative depth guidance: patch descriptors, cosine-similarity tensors and
//! the zero-clamped softplus loss that aligns image-feature similarities with
//! depth similarities.
//!
//! Each patch is described by six handcrafted channels computed from a single
//! intensity raster (luminance for images, depth for depth maps):
//!
//! 0. mean intensity
//! 1. intensity standard deviation
//! 2. mean absolute horizontal forward difference inside the patch
//! 3. mean absolute vertical forward difference inside the patch
//! 4. mean of the central half-size block (fine pyramid sample)
//! 5. mean intensity over the 3×3 patch neighborhood (coarse pyramid sample)
//!
//! Channels are then standardized across the patches of the raster so that
//! cosine similarity compares patches relative to the rest of the view.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

pub const DESCRIPTOR_DIM: usize = 6;
/// Smoothing inside the standard deviation and absolute value so both are
/// differentiable at zero.
const SMOOTH: f64 = 1e-8;
/// Variance floor of the across-patch standardization.
const STANDARDIZE_EPS: f64 = 1e-8;
/// Descriptors with a smaller norm are flagged as degenerate.
const ZERO_NORM: f64 = 1e-12;
pub const BIAS_MIN: f64 = 1e-4;
pub const BIAS_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("similarity tensors have {0} and {1} patches")]
    ShapeMismatch(usize, usize),
    #[error("raster of {width}x{height} holds no {patch_px}px patch")]
    TooSmall {
        width: usize,
        height: usize,
        patch_px: usize,
    },
}

/// How `b` and `ω` evolve over training steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `v(t) = v(t−1)^{t/m}` applied every step.
    Recurrence,
    /// `v(t) = v0^{max(0, 1 − t/m)}`: rises from `v0` to 1 across the horizon.
    ClosedForm,
    /// `v(t) = v0` throughout.
    Constant,
}

/// How the per-pair terms of a view are combined in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairReduction {
    Sum,
    /// Divide the sum by the number of pairs, so the weight does not depend
    /// on the patch count.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceParams {
    pub b0: f64,
    pub horizon: u64,
    pub patch_px: usize,
    pub schedule: ScheduleMode,
    /// Build the depth tensor from the rendered depth without propagating
    /// gradients into it.
    pub detach_depth: bool,
    pub reduction: PairReduction,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            b0: 0.4,
            horizon: 6000,
            patch_px: 8,
            schedule: ScheduleMode::Constant,
            detach_depth: true,
            reduction: PairReduction::Mean,
        }
    }
}

/// `clamp(b_prev^{t/m}, 1e-4, 1 − 1e-4)`.
pub fn bias_schedule(b_prev: f64, t: u64, horizon: u64) -> f64 {
    b_prev.powf(t as f64 / horizon.max(1) as f64).clamp(BIAS_MIN, BIAS_MAX)
}

/// Value of a schedule at step `t` given its value at `t − 1` and its seed.
pub fn schedule_value(mode: ScheduleMode, v0: f64, v_prev: f64, t: u64, horizon: u64) -> f64 {
    if t == 0 {
        return v0;
    }
    match mode {
        ScheduleMode::Recurrence => bias_schedule(v_prev, t, horizon),
        ScheduleMode::ClosedForm => {
            let e = (1.0 - t as f64 / horizon.max(1) as f64).max(0.0);
            v0.powf(e).clamp(BIAS_MIN, BIAS_MAX)
        }
        ScheduleMode::Constant => v0,
    }
}

/// Values needed to pull descriptor gradients back to pixels.
#[derive(Clone, Debug)]
struct FeatureCache {
    source: ScalarMap,
    raw: Vec<f64>,
    channel_mean: [f64; DESCRIPTOR_DIM],
    channel_sigma: [f64; DESCRIPTOR_DIM],
}

/// Standardized descriptors of a `cols × rows` grid of square patches.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub cols: usize,
    pub rows: usize,
    pub patch_px: usize,
    pub descriptor_dim: usize,
    /// Row-major patches, `descriptor_dim` values each.
    pub descriptors: Vec<f64>,
    pub zero_norm: Vec<bool>,
    cache: Option<FeatureCache>,
}

impl PatchGrid {
    /// Grid over explicit descriptors, one row per patch (no pixel source).
    pub fn from_descriptors(descriptors: &[Vec<f64>]) -> Self {
        let dim = descriptors.first().map_or(0, |d| d.len());
        assert!(descriptors.iter().all(|d| d.len() == dim), "ragged descriptors");
        let flat: Vec<f64> = descriptors.iter().flatten().copied().collect();
        let zero_norm = descriptors.iter().map(|d| norm(d) < ZERO_NORM).collect();
        Self {
            cols: descriptors.len(),
            rows: 1,
            patch_px: 0,
            descriptor_dim: dim,
            descriptors: flat,
            zero_norm,
            cache: None,
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn descriptor(&self, p: usize) -> &[f64] {
        &self.descriptors[p * self.descriptor_dim..(p + 1) * self.descriptor_dim]
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
fn smooth_abs(d: f64) -> f64 {
    (d * d + SMOOTH).sqrt() - SMOOTH.sqrt()
}

#[inline]
fn smooth_abs_grad(d: f64) -> f64 {
    d / (d * d + SMOOTH).sqrt()
}

/// Side and offset of the central block of a patch.
fn center_block(patch_px: usize) -> (usize, usize) {
    let h = (patch_px / 2).max(1);
    (h, (patch_px - h) / 2)
}

fn neighborhood(cols: usize, rows: usize, pc: usize, pr: usize) -> impl Iterator<Item = usize> {
    let c0 = pc.saturating_sub(1);
    let r0 = pr.saturating_sub(1);
    let c1 = (pc + 1).min(cols - 1);
    let r1 = (pr + 1).min(rows - 1);
    (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| r * cols + c))
}

fn raw_descriptors(map: &ScalarMap, cols: usize, rows: usize, p: usize) -> Vec<f64> {
    let n = (p * p) as f64;
    let pairs = (p * (p - 1)) as f64;
    let (block, off) = center_block(p);
    let mut raw = vec![0.0; cols * rows * DESCRIPTOR_DIM];
    for pr in 0..rows {
        for pc in 0..cols {
            let (x0, y0) = (pc * p, pr * p);
            let px = |x: usize, y: usize| map.get(x0 + x, y0 + y);
            let mut sum = 0.0;
            for y in 0..p {
                for x in 0..p {
                    sum += px(x, y);
                }
            }
            let mean = sum / n;
            let mut var = 0.0;
            let (mut gx, mut gy) = (0.0, 0.0);
            for y in 0..p {
                for x in 0..p {
                    var += (px(x, y) - mean).powi(2);
                    if x + 1 < p {
                        gx += smooth_abs(px(x + 1, y) - px(x, y));
                    }
                    if y + 1 < p {
                        gy += smooth_abs(px(x, y + 1) - px(x, y));
                    }
                }
            }
            var /= n;
            let mut center = 0.0;
            for y in 0..block {
                for x in 0..block {
                    center += px(off + x, off + y);
                }
            }
            let d = &mut raw[(pr * cols + pc) * DESCRIPTOR_DIM..][..DESCRIPTOR_DIM];
            d[0] = mean;
            d[1] = (var + SMOOTH).sqrt() - SMOOTH.sqrt();
            if pairs > 0.0 {
                d[2] = gx / pairs;
                d[3] = gy / pairs;
            }
            d[4] = center / (block * block) as f64;
        }
    }
    for pr in 0..rows {
        for pc in 0..cols {
            let (mut s, mut k) = (0.0, 0.0);
            for q in neighborhood(cols, rows, pc, pr) {
                s += raw[q * DESCRIPTOR_DIM];
                k += 1.0;
            }
            raw[(pr * cols + pc) * DESCRIPTOR_DIM + 5] = s / k;
        }
    }
    raw
}

/// Patch descriptors of a single-channel raster, cropped to the largest
/// whole number of patches.
pub fn describe(map: &ScalarMap, patch_px: usize) -> Result<PatchGrid, GuidanceError> {
    let (cols, rows) = (map.width / patch_px.max(1), map.height / patch_px.max(1));
    if patch_px == 0 || cols == 0 || rows == 0 {
        return Err(GuidanceError::TooSmall {
            width: map.width,
            height: map.height,
            patch_px,
        });
    }
    let raw = raw_descriptors(map, cols, rows, patch_px);
    let n = cols * rows;
    let mut channel_mean = [0.0; DESCRIPTOR_DIM];
    let mut channel_sigma = [0.0; DESCRIPTOR_DIM];
    let mut z = vec![0.0; raw.len()];
    for c in 0..DESCRIPTOR_DIM {
        let mean = (0..n).map(|p| raw[p * DESCRIPTOR_DIM + c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|p| (raw[p * DESCRIPTOR_DIM + c] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sigma = (var + STANDARDIZE_EPS).sqrt();
        for p in 0..n {
            z[p * DESCRIPTOR_DIM + c] = (raw[p * DESCRIPTOR_DIM + c] - mean) / sigma;
        }
        channel_mean[c] = mean;
        channel_sigma[c] = sigma;
    }
    let zero_norm = z.chunks(DESCRIPTOR_DIM).map(|d| norm(d) < ZERO_NORM).collect();
    Ok(PatchGrid {
        cols,
        rows,
        patch_px,
        descriptor_dim: DESCRIPTOR_DIM,
        descriptors: z,
        zero_norm,
        cache: Some(FeatureCache {
            source: map.clone(),
            raw,
            channel_mean,
            channel_sigma,
        }),
    })
}

pub fn extract_features(img: &ImageBuffer, patch_px: usize) -> Result<PatchGrid, GuidanceError> {
    describe(&img.luminance(), patch_px)
}

pub fn extract_depth_features(depth: &DepthMap, patch_px: usize) -> Result<PatchGrid, GuidanceError> {
    describe(depth, patch_px)
}

/// Gradient w.r.t. the source raster given the gradient w.r.t. the
/// standardized descriptors. Pixels outside the patch grid get zero.
///
/// Panics if the grid was not produced by [`describe`].
pub fn describe_backward(grid: &PatchGrid, d_desc: &[f64]) -> ScalarMap {
    let cache = grid.cache.as_ref().expect("grid has no pixel source");
    let (cols, rows, p) = (grid.cols, grid.rows, grid.patch_px);
    let n = cols * rows;
    assert_eq!(d_desc.len(), n * DESCRIPTOR_DIM);
    let raw = &cache.raw;
    let map = &cache.source;

    // Standardization: dr = (dz − mean(dz) − z·mean(dz·z)) / σ per channel.
    let mut d_raw = vec![0.0; raw.len()];
    for c in 0..DESCRIPTOR_DIM {
        let sigma = cache.channel_sigma[c];
        let (mut m_dz, mut m_dzz) = (0.0, 0.0);
        for q in 0..n {
            let z = grid.descriptors[q * DESCRIPTOR_DIM + c];
            m_dz += d_desc[q * DESCRIPTOR_DIM + c];
            m_dzz += d_desc[q * DESCRIPTOR_DIM + c] * z;
        }
        m_dz /= n as f64;
        m_dzz /= n as f64;
        for q in 0..n {
            let z = grid.descriptors[q * DESCRIPTOR_DIM + c];
            d_raw[q * DESCRIPTOR_DIM + c] = (d_desc[q * DESCRIPTOR_DIM + c] - m_dz - z * m_dzz) / sigma;
        }
    }
    debug_assert!(cache.channel_mean.iter().all(|m| m.is_finite()));

    // The neighborhood channel feeds back into the patch means.
    for pr in 0..rows {
        for pc in 0..cols {
            let g5 = d_raw[(pr * cols + pc) * DESCRIPTOR_DIM + 5];
            let members: Vec<usize> = neighborhood(cols, rows, pc, pr).collect();
            let share = g5 / members.len() as f64;
            for q in members {
                d_raw[q * DESCRIPTOR_DIM] += share;
            }
        }
    }

    let npx = (p * p) as f64;
    let pairs = (p * (p - 1)) as f64;
    let (block, off) = center_block(p);
    let mut out = ScalarMap::zeros(map.width, map.height);
    for pr in 0..rows {
        for pc in 0..cols {
            let q = pr * cols + pc;
            let g = &d_raw[q * DESCRIPTOR_DIM..(q + 1) * DESCRIPTOR_DIM];
            let r = &raw[q * DESCRIPTOR_DIM..(q + 1) * DESCRIPTOR_DIM];
            let mean = r[0];
            let sd = (r[1] + SMOOTH.sqrt()).max(f64::MIN_POSITIVE);
            let (x0, y0) = (pc * p, pr * p);
            let px = |x: usize, y: usize| map.get(x0 + x, y0 + y);
            let mut acc = vec![0.0; p * p];
            for y in 0..p {
                for x in 0..p {
                    let v = px(x, y);
                    acc[y * p + x] += g[0] / npx + g[1] * (v - mean) / (npx * sd);
                    if pairs > 0.0 {
                        if x + 1 < p {
                            let s = g[2] * smooth_abs_grad(px(x + 1, y) - v) / pairs;
                            acc[y * p + x + 1] += s;
                            acc[y * p + x] -= s;
                        }
                        if y + 1 < p {
                            let s = g[3] * smooth_abs_grad(px(x, y + 1) - v) / pairs;
                            acc[(y + 1) * p + x] += s;
                            acc[y * p + x] -= s;
                        }
                    }
                }
            }
            let share = g[4] / (block * block) as f64;
            for y in 0..block {
                for x in 0..block {
                    acc[(off + y) * p + off + x] += share;
                }
            }
            for y in 0..p {
                for x in 0..p {
                    out.set(x0 + x, y0 + y, acc[y * p + x]);
                }
            }
        }
    }
    out
}

/// Which raster a similarity tensor was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Image,
    Depth,
}

/// Symmetric `n × n` matrix of patch cosine similarities.
#[derive(Clone, Debug)]
pub struct SimilarityTensor {
    pub n: usize,
    pub values: Vec<f64>,
    pub kind: SimilarityKind,
    pub degenerate: Vec<bool>,
}

impl SimilarityTensor {
    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.n + q]
    }

    pub fn from_values(n: usize, values: Vec<f64>, kind: SimilarityKind) -> Self {
        assert_eq!(values.len(), n * n);
        Self {
            n,
            values,
            kind,
            degenerate: vec![false; n],
        }
    }
}

pub fn similarity(grid: &PatchGrid, kind: SimilarityKind) -> SimilarityTensor {
    let n = grid.len();
    let norms: Vec<f64> = (0..n).map(|p| norm(grid.descriptor(p))).collect();
    let mut values = vec![0.0; n * n];
    for p in 0..n {
        if grid.zero_norm[p] {
            continue;
        }
        values[p * n + p] = 1.0;
        for q in p + 1..n {
            if grid.zero_norm[q] {
                continue;
            }
            let dot: f64 = grid
                .descriptor(p)
                .iter()
                .zip(grid.descriptor(q))
                .map(|(a, b)| a * b)
                .sum();
            let c = (dot / (norms[p] * norms[q])).clamp(-1.0, 1.0);
            values[p * n + q] = c;
            values[q * n + p] = c;
        }
    }
    SimilarityTensor {
        n,
        values,
        kind,
        degenerate: grid.zero_norm.clone(),
    }
}

/// Descriptor gradient given a gradient on the strict upper triangle of the
/// similarity matrix.
pub fn similarity_backward(grid: &PatchGrid, d_sim: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let dim = grid.descriptor_dim;
    assert_eq!(d_sim.len(), n * n);
    let norms: Vec<f64> = (0..n).map(|p| norm(grid.descriptor(p))).collect();
    let mut out = vec![0.0; n * dim];
    for p in 0..n {
        if grid.zero_norm[p] {
            continue;
        }
        for q in p + 1..n {
            let g = d_sim[p * n + q];
            if g == 0.0 || grid.zero_norm[q] {
                continue;
            }
            let (a, b) = (grid.descriptor(p), grid.descriptor(q));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let nn = norms[p] * norms[q];
            let c = dot / nn;
            for k in 0..dim {
                out[p * dim + k] += g * (b[k] / nn - c * a[k] / (norms[p] * norms[p]));
                out[q * dim + k] += g * (a[k] / nn - c * b[k] / (norms[q] * norms[q]));
            }
        }
    }
    out
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn logistic(x: f64) -> f64 {
    crate::gaussian::sigmoid(x)
}

#[derive(Clone, Debug)]
pub struct RdgLoss {
    pub value: f64,
    /// Gradient w.r.t. F, strict upper triangle only.
    pub d_f: Vec<f64>,
    /// Gradient w.r.t. D, strict upper triangle only.
    pub d_d: Vec<f64>,
}

/// `Σ_{p<q} log(1 + exp(−(D_pq − b)·max(F_pq, 0)))`.
pub fn rdg_loss(f: &SimilarityTensor, d: &SimilarityTensor, b: f64) -> Result<RdgLoss, GuidanceError> {
    if f.n != d.n {
        return Err(GuidanceError::ShapeMismatch(f.n, d.n));
    }
    let n = f.n;
    let mut value = 0.0;
    let mut d_f = vec![0.0; n * n];
    let mut d_d = vec![0.0; n * n];
    for p in 0..n {
        for q in p + 1..n {
            let fv = f.get(p, q);
            let fp = fv.max(0.0);
            let dm = d.get(p, q) - b;
            let x = -dm * fp;
            value += softplus(x);
            let s = logistic(x);
            if fv > 0.0 {
                d_f[p * n + q] = -dm * s;
            }
            d_d[p * n + q] = -fp * s;
        }
    }
    Ok(RdgLoss { value, d_f, d_d })
}

/// Guidance loss of one rendered view and its gradients w.r.t. the rendered
/// image and (unless detached) the rendered depth.
#[derive(Clone, Debug)]
pub struct RenderGuidance {
    pub value: f64,
    pub d_image: ImageBuffer,
    pub d_depth: Option<ScalarMap>,
}

pub fn rdg_for_view(
    image: &ImageBuffer,
    depth: &DepthMap,
    b: f64,
    params: &GuidanceParams,
) -> Result<RenderGuidance, GuidanceError> {
    let fg = extract_features(image, params.patch_px)?;
    let dg = extract_depth_features(depth, params.patch_px)?;
    let fs = similarity(&fg, SimilarityKind::Image);
    let ds = similarity(&dg, SimilarityKind::Depth);
    let mut loss = rdg_loss(&fs, &ds, b)?;
    let pairs = fs.n * fs.n.saturating_sub(1) / 2;
    if params.reduction == PairReduction::Mean && pairs > 0 {
        let k = 1.0 / pairs as f64;
        loss.value *= k;
        loss.d_f.iter_mut().chain(loss.d_d.iter_mut()).for_each(|g| *g *= k);
    }
    let d_luma = describe_backward(&fg, &similarity_backward(&fg, &loss.d_f));
    let d_depth = (!params.detach_depth).then(|| describe_backward(&dg, &similarity_backward(&dg, &loss.d_d)));
    Ok(RenderGuidance {
        value: loss.value,
        d_image: ImageBuffer::from_luminance_grad(&d_luma),
        d_depth,
    })
}
