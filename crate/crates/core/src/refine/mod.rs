//! RGB-guided refinement of a coarse depth map.
//!
//! The coarse depth is quantized into `l` evenly spaced levels and treated as
//! a labeled field. Labels are then updated by iterated conditional modes
//! (raster order, exact local energy) first under a wide kernel set and then
//! under a narrow one.

mod energy;

pub use energy::{
    central_gradient, hf_terms, hf_weight, pairwise_cost, quantize, range_term, spatial_color_kernel, unary_cost,
    unary_from_similarity, window_ssim, HfTerms, FLAT_WINDOW_STD, KERNEL_UNIT, NEUTRAL_SIMILARITY,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("depth is {depth_w}x{depth_h} but image is {image_w}x{image_h}")]
    ResolutionMismatch {
        depth_w: usize,
        depth_h: usize,
        image_w: usize,
        image_h: usize,
    },
    #[error("invalid energy parameters: {0}")]
    InvalidParams(&'static str),
    #[error("coarse depth contains non-finite values")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    pub w_u: f64,
    pub w_p: f64,
    pub w_h: f64,
    /// Spatial bandwidth, pixels.
    pub theta_alpha: f64,
    /// Depth bandwidth, in labels.
    pub theta_mu: f64,
    /// Color bandwidth, color × 255.
    pub theta_beta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub labels: usize,
    /// Radius of the unary SSIM window.
    pub ssim_radius: usize,
    pub neighborhood_radius: f64,
    pub icm_sweeps: usize,
    /// Extra two-pass runs started from constant labelings, evenly spaced
    /// over the label range. Read from the fine parameters; the result with
    /// the lowest fine energy wins.
    pub restarts: usize,
    /// Clamp floor inside the unary logarithm.
    pub epsilon: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self::coarse()
    }
}

impl EnergyParams {
    pub fn coarse() -> Self {
        Self::with_bandwidths(35.0, 10.0, 10.0, 9.0)
    }

    pub fn fine() -> Self {
        Self::with_bandwidths(10.0, 2.0, 2.0, 3.0)
    }

    fn with_bandwidths(theta_alpha: f64, theta_mu: f64, theta_beta: f64, radius_cap: f64) -> Self {
        Self {
            w_u: 1.0,
            w_p: 10.0,
            w_h: 5.0,
            theta_alpha,
            theta_mu,
            theta_beta,
            tau: 5.0,
            gamma: 10.0,
            labels: 64,
            ssim_radius: 3,
            neighborhood_radius: (3.0 * theta_alpha).min(radius_cap),
            icm_sweeps: 10,
            restarts: 8,
            epsilon: 1e-6,
        }
    }

    pub fn with_labels(mut self, labels: usize) -> Self {
        self.labels = labels;
        self
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        let bw = [self.theta_alpha, self.theta_mu, self.theta_beta, self.tau, self.gamma];
        if bw.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(RefineError::InvalidParams("bandwidths must be positive"));
        }
        if self.labels < 2 || self.labels > u16::MAX as usize {
            return Err(RefineError::InvalidParams("label count must be in [2, 65535]"));
        }
        if [self.w_u, self.w_p, self.w_h].iter().any(|&w| !(w >= 0.0)) {
            return Err(RefineError::InvalidParams("weights must be non-negative"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(RefineError::InvalidParams("epsilon must be in (0, 1)"));
        }
        if !(self.neighborhood_radius >= 0.0) {
            return Err(RefineError::InvalidParams("neighborhood radius must be non-negative"));
        }
        Ok(())
    }
}

/// Integer label raster plus the depth value of every label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDepthField {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
    pub level_values: Vec<f64>,
}

impl LabeledDepthField {
    /// Nearest-level quantization of `depth` into `labels` levels spanning its
    /// range. The depth must not be constant.
    pub fn quantize(depth: &DepthMap, labels: usize) -> Self {
        let (lo, hi) = depth.min_max();
        let top = (labels - 1) as f64;
        let level_values = (0..labels)
            .map(|k| {
                if k + 1 == labels {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / top
                }
            })
            .collect();
        let range = hi - lo;
        Self {
            width: depth.width,
            height: depth.height,
            labels: depth
                .data
                .iter()
                .map(|&d| quantize((d - lo) / range, labels) as u16)
                .collect(),
            level_values,
        }
    }

    pub fn label_count(&self) -> usize {
        self.level_values.len()
    }

    pub fn decode(&self) -> DepthMap {
        ScalarMap::from_vec(
            self.width,
            self.height,
            self.labels.iter().map(|&l| self.level_values[l as usize]).collect(),
        )
    }
}

/// Energy of labelings of one image, anchored to one coarse depth map.
///
/// Everything that does not depend on the labeling (window similarities,
/// pair weights, the label-difference table) is computed once here.
pub struct EnergyModel {
    width: usize,
    height: usize,
    labels: usize,
    params: EnergyParams,
    reference: Vec<u16>,
    /// `w_u·ψ_u` when keeping / changing the reference label.
    unary_keep: Vec<f64>,
    unary_change: Vec<f64>,
    /// `g_u` of the input depth.
    g_u: Vec<f64>,
    luma_grad: Vec<[f64; 2]>,
    /// Per pixel: every neighbor within the truncation radius with its
    /// weight `w_p · spatial/color kernel · g_p`.
    neighbors: Vec<Vec<(u32, f64)>>,
    /// `range_term` between label positions, `labels × labels`.
    label_diff: Vec<f64>,
}

impl EnergyModel {
    pub fn new(coarse: &DepthMap, image: &ImageBuffer, params: &EnergyParams) -> Result<Self, RefineError> {
        params.validate()?;
        check_shapes(coarse, image)?;
        if !coarse.is_finite() {
            return Err(RefineError::NonFinite);
        }
        let reference = LabeledDepthField::quantize(coarse, params.labels);
        Ok(Self::from_reference(&reference, coarse, image, params))
    }

    fn from_reference(
        reference: &LabeledDepthField,
        coarse: &DepthMap,
        image: &ImageBuffer,
        params: &EnergyParams,
    ) -> Self {
        let (w, h) = (image.width, image.height);
        let l = params.labels;
        let luma = image.luminance();
        let (lo, hi) = coarse.min_max();
        let range = (hi - lo).max(f64::MIN_POSITIVE);
        let norm_coarse = coarse.map(|d| (d - lo) / range);

        let sims: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|i| window_ssim(&norm_coarse, &luma, i % w, i / w, params.ssim_radius))
            .collect();
        let unary_keep = sims
            .iter()
            .map(|&s| params.w_u * unary_from_similarity(s, true, l, params.epsilon))
            .collect();
        let unary_change = sims
            .iter()
            .map(|&s| params.w_u * unary_from_similarity(s, false, l, params.epsilon))
            .collect();

        let luma_grad: Vec<[f64; 2]> = (0..w * h).map(|i| central_gradient(&luma, i % w, i / w)).collect();
        let hf = hf_terms(&luma, &norm_coarse, params);
        let rgb255: Vec<[f64; 3]> = (0..w * h)
            .map(|i| {
                let p = image.pixel(i % w, i / w);
                [p[0] * KERNEL_UNIT, p[1] * KERNEL_UNIT, p[2] * KERNEL_UNIT]
            })
            .collect();

        let r = params.neighborhood_radius;
        let ri = r.floor() as isize;
        let neighbors = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                let mut out = Vec::new();
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        if ((dx * dx + dy * dy) as f64) > r * r {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        let k = spatial_color_kernel(
                            [x as f64, y as f64],
                            [nx as f64, ny as f64],
                            rgb255[i],
                            rgb255[j],
                            params,
                        );
                        let wt = params.w_p * k * hf.g_p(i, j);
                        if wt > 0.0 {
                            out.push((j as u32, wt));
                        }
                    }
                }
                out
            })
            .collect();

        let mut label_diff = vec![0.0; l * l];
        for a in 0..l {
            for b in 0..l {
                label_diff[a * l + b] = range_term(a as f64 - b as f64, params.theta_mu);
            }
        }

        Self {
            width: w,
            height: h,
            labels: l,
            params: params.clone(),
            reference: reference.labels.clone(),
            unary_keep,
            unary_change,
            g_u: hf.g_u.data,
            luma_grad,
            neighbors,
            label_diff,
        }
    }

    pub fn reference_labels(&self) -> &[u16] {
        &self.reference
    }

    #[inline]
    fn label_pos(&self, label: u16) -> f64 {
        label as f64 / (self.labels - 1) as f64
    }

    /// `w_u·ψ_u·g_u + w_h·ψ_h` at pixel `k`, reading labels through `lab`.
    /// `ψ_h` follows the labeling, `g_u` is fixed by the input depth.
    #[inline]
    fn pixel_term(&self, k: usize, lab: impl Fn(usize) -> u16) -> f64 {
        let (w, h) = (self.width, self.height);
        let (x, y) = (k % w, k / w);
        let at = |xx: usize, yy: usize| self.label_pos(lab(yy * w + xx));
        let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
        let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
        let gi = self.luma_grad[k];
        let r2 = (gi[0] - gx).powi(2) + (gi[1] - gy).powi(2);
        let unary = if lab(k) == self.reference[k] {
            self.unary_keep[k]
        } else {
            self.unary_change[k]
        };
        self.params.w_h * r2 + unary * self.g_u[k]
    }

    pub fn total_energy(&self, labels: &[u16]) -> f64 {
        assert_eq!(labels.len(), self.width * self.height);
        let mut e = 0.0;
        for k in 0..labels.len() {
            e += self.pixel_term(k, |i| labels[i]);
        }
        for (i, nb) in self.neighbors.iter().enumerate() {
            let li = labels[i] as usize;
            for &(j, wt) in nb {
                if (j as usize) > i {
                    e += wt * self.label_diff[li * self.labels + labels[j as usize] as usize];
                }
            }
        }
        e
    }

    /// Pixels whose pixel term depends on the label at `i`.
    fn affected(&self, i: usize, out: &mut Vec<usize>) {
        let (w, h) = (self.width, self.height);
        let (x, y) = (i % w, i / w);
        out.clear();
        out.push(i);
        if x > 0 {
            out.push(i - 1);
        }
        if x + 1 < w {
            out.push(i + 1);
        }
        if y > 0 {
            out.push(i - w);
        }
        if y + 1 < h {
            out.push(i + w);
        }
    }

    /// One raster-order sweep. Returns the number of changed labels.
    fn sweep(
        &self,
        labels: &mut [u16],
        hist: &mut [f64],
        touched: &mut Vec<usize>,
        affected: &mut Vec<usize>,
    ) -> usize {
        let l = self.labels;
        let mut changed = 0;
        for i in 0..labels.len() {
            touched.clear();
            for &(j, wt) in &self.neighbors[i] {
                let lj = labels[j as usize] as usize;
                if hist[lj] == 0.0 {
                    touched.push(lj);
                }
                hist[lj] += wt;
            }
            self.affected(i, affected);
            let current = labels[i];
            let local = |labels: &[u16], a: u16| {
                let lab = |k: usize| if k == i { a } else { labels[k] };
                let mut e: f64 = affected.iter().map(|&k| self.pixel_term(k, lab)).sum();
                let row = &self.label_diff[a as usize * l..(a as usize + 1) * l];
                for &b in touched.iter() {
                    e += row[b] * hist[b];
                }
                e
            };
            let e_current = local(labels, current);
            let mut best = (e_current, current);
            for a in 0..l as u16 {
                if a == current {
                    continue;
                }
                let e = local(labels, a);
                if e < best.0 {
                    best = (e, a);
                }
            }
            // Require a strict improvement beyond rounding so sweeps terminate.
            if best.1 != current && best.0 < e_current - 1e-12 * e_current.abs().max(1.0) {
                labels[i] = best.1;
                changed += 1;
            }
            for &b in touched.iter() {
                hist[b] = 0.0;
            }
        }
        changed
    }

    /// Iterated conditional modes from `init`. The energy after every sweep
    /// is appended to `trace` (the first entry is the initial energy).
    pub fn icm(&self, init: &[u16], trace: &mut Vec<f64>) -> Vec<u16> {
        let mut labels = init.to_vec();
        let mut hist = vec![0.0; self.labels];
        let mut touched = Vec::new();
        let mut affected = Vec::with_capacity(5);
        trace.push(self.total_energy(&labels));
        for _ in 0..self.params.icm_sweeps {
            let changed = self.sweep(&mut labels, &mut hist, &mut touched, &mut affected);
            let e = self.total_energy(&labels);
            let prev = *trace.last().unwrap();
            debug_assert!(
                e <= prev + 1e-9 * prev.abs().max(1.0),
                "ICM energy rose from {prev} to {e}"
            );
            trace.push(e);
            if changed == 0 {
                break;
            }
        }
        labels
    }
}

fn check_shapes(depth: &DepthMap, image: &ImageBuffer) -> Result<(), RefineError> {
    if depth.width != image.width || depth.height != image.height {
        return Err(RefineError::ResolutionMismatch {
            depth_w: depth.width,
            depth_h: depth.height,
            image_w: image.width,
            image_h: image.height,
        });
    }
    Ok(())
}

/// Energy of `field` against the image and the coarse depth it was
/// quantized from.
pub fn total_energy(
    field: &LabeledDepthField,
    coarse: &DepthMap,
    image: &ImageBuffer,
    params: &EnergyParams,
) -> Result<f64, RefineError> {
    if field.label_count() != params.labels {
        return Err(RefineError::InvalidParams("field label count differs from params"));
    }
    let model = EnergyModel::new(coarse, image, params)?;
    Ok(model.total_energy(&field.labels))
}

/// Outcome of [`refine_with_report`].
#[derive(Clone, Debug)]
pub struct RefineReport {
    pub depth: DepthMap,
    pub field: Option<LabeledDepthField>,
    /// True when the coarse depth was constant and returned unchanged.
    pub degenerate: bool,
    pub coarse_trace: Vec<f64>,
    pub fine_trace: Vec<f64>,
    /// Fine-pass energy of the quantized input.
    pub input_energy: f64,
    /// Fine-pass energy of the output.
    pub final_energy: f64,
}

pub fn refine(
    coarse_depth: &DepthMap,
    image: &ImageBuffer,
    coarse: &EnergyParams,
    fine: &EnergyParams,
) -> Result<DepthMap, RefineError> {
    Ok(refine_with_report(coarse_depth, image, coarse, fine)?.depth)
}

/// Two-pass refinement. The fine pass starts from the coarse-pass labeling,
/// or from the quantized input when that has lower fine energy, so the
/// output never has higher fine energy than the input. With
/// `fine.restarts > 0` the same two passes are repeated from constant
/// labelings and the lowest fine energy is kept (ties go to the earlier run).
pub fn refine_with_report(
    coarse_depth: &DepthMap,
    image: &ImageBuffer,
    coarse: &EnergyParams,
    fine: &EnergyParams,
) -> Result<RefineReport, RefineError> {
    coarse.validate()?;
    fine.validate()?;
    if coarse.labels != fine.labels {
        return Err(RefineError::InvalidParams(
            "coarse and fine passes must share the label count",
        ));
    }
    check_shapes(coarse_depth, image)?;
    if !coarse_depth.is_finite() {
        return Err(RefineError::NonFinite);
    }
    let (lo, hi) = coarse_depth.min_max();
    if coarse_depth.is_empty() || hi - lo < fine.epsilon {
        log::debug!("coarse depth range {:e} below epsilon; returning input", hi - lo);
        return Ok(RefineReport {
            depth: coarse_depth.clone(),
            field: None,
            degenerate: true,
            coarse_trace: Vec::new(),
            fine_trace: Vec::new(),
            input_energy: 0.0,
            final_energy: 0.0,
        });
    }

    let reference = LabeledDepthField::quantize(coarse_depth, coarse.labels);
    let coarse_model = EnergyModel::from_reference(&reference, coarse_depth, image, coarse);
    let fine_model = EnergyModel::from_reference(&reference, coarse_depth, image, fine);
    let input_energy = fine_model.total_energy(&reference.labels);

    let two_pass = |start: &[u16], keep_start: bool| {
        let mut coarse_trace = Vec::new();
        let after_coarse = coarse_model.icm(start, &mut coarse_trace);
        let init = if keep_start && fine_model.total_energy(start) < fine_model.total_energy(&after_coarse) {
            start
        } else {
            &after_coarse
        };
        let mut fine_trace = Vec::new();
        let labels = fine_model.icm(init, &mut fine_trace);
        (labels, coarse_trace, fine_trace)
    };
    let n = reference.labels.len();
    let l = fine.labels;
    let runs: Vec<_> = std::iter::once(None)
        .chain((0..fine.restarts).map(|k| Some(((2 * k + 1) * l / (2 * fine.restarts)).min(l - 1) as u16)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| match start {
            None => two_pass(&reference.labels, true),
            Some(a) => two_pass(&vec![a; n], false),
        })
        .collect();
    let (labels, coarse_trace, fine_trace) = runs
        .into_iter()
        .reduce(|best, run| if run.2.last() < best.2.last() { run } else { best })
        .unwrap();
    let final_energy = *fine_trace.last().unwrap();

    let field = LabeledDepthField { labels, ..reference };
    Ok(RefineReport {
        depth: field.decode(),
        field: Some(field),
        degenerate: false,
        coarse_trace,
        fine_trace,
        input_energy,
        final_energy,
    })
}

#[cfg(test)]
mod tests;
