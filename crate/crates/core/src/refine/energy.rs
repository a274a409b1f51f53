//! Terms of the refined-depth energy
//!
//! ```text
//! E(D_r) = Σ_i [w_u ψ_u(i) g_u(i) + w_h ψ_h(i)] + Σ_{i<j} w_p ψ_p(i,j) g_p(i,j)
//! ```
//!
//! over a labeled depth field. Depth differences in the range kernel (`θ_μ`)
//! are label differences. Color and gradient magnitudes that enter the other
//! kernels (`θ_β`, `τ`, `γ`) are expressed on a 0–255 scale, with depth first
//! normalized to `[0, 1]` over the coarse depth range. `ψ_h` itself uses the
//! unscaled `[0, 1]` units.

use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

use super::EnergyParams;

/// Scale of the units the kernel bandwidths are expressed in.
pub const KERNEL_UNIT: f64 = 255.0;
/// Window standard deviation below which a window counts as flat
/// (normalized depth or luminance units).
pub const FLAT_WINDOW_STD: f64 = 1e-3;
/// Window similarity used when exactly one of the two windows is flat.
pub const NEUTRAL_SIMILARITY: f64 = 0.5;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Central-difference gradient with replicate padding.
pub fn central_gradient(map: &ScalarMap, x: usize, y: usize) -> [f64; 2] {
    let (xi, yi) = (x as isize, y as isize);
    [
        0.5 * (map.get_clamped(xi + 1, yi) - map.get_clamped(xi - 1, yi)),
        0.5 * (map.get_clamped(xi, yi + 1) - map.get_clamped(xi, yi - 1)),
    ]
}

/// Structural similarity of the `(2r+1)²` windows (clipped to the raster)
/// centered at `(x, y)` after z-normalizing each window.
///
/// For z-normalized windows SSIM reduces to `(2ρ + C2)/(2 + C2)` with `ρ` the
/// window correlation. Flat windows carry no structure: two flat windows are
/// identical (1), one flat window gives [`NEUTRAL_SIMILARITY`].
pub fn window_ssim(depth: &ScalarMap, luma: &ScalarMap, x: usize, y: usize, radius: usize) -> f64 {
    let x0 = x.saturating_sub(radius);
    let y0 = y.saturating_sub(radius);
    let x1 = (x + radius).min(depth.width - 1);
    let y1 = (y + radius).min(depth.height - 1);
    let mut n = 0.0;
    let (mut sd, mut sl) = (0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            sd += depth.get(xx, yy);
            sl += luma.get(xx, yy);
            n += 1.0;
        }
    }
    let (md, ml) = (sd / n, sl / n);
    let (mut vd, mut vl, mut cv) = (0.0, 0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let a = depth.get(xx, yy) - md;
            let b = luma.get(xx, yy) - ml;
            vd += a * a;
            vl += b * b;
            cv += a * b;
        }
    }
    let (sdv, slv) = ((vd / n).sqrt(), (vl / n).sqrt());
    match (sdv < FLAT_WINDOW_STD, slv < FLAT_WINDOW_STD) {
        (true, true) => 1.0,
        (true, false) | (false, true) => NEUTRAL_SIMILARITY,
        (false, false) => {
            let rho = (cv / n) / (sdv * slv);
            // SSIM of z-normalized windows: μ = 0, σ² = 1, σ_xy = ρ.
            (SSIM_C1 * (2.0 * rho + SSIM_C2)) / (SSIM_C1 * (2.0 + SSIM_C2))
        }
    }
}

/// Piecewise labeled unary term given the window similarity at a pixel.
pub fn unary_from_similarity(similarity: f64, is_reference_label: bool, labels: usize, eps: f64) -> f64 {
    if is_reference_label {
        -similarity.clamp(eps, 1.0).ln()
    } else {
        -((1.0 - similarity) / (labels as f64 - 1.0)).clamp(eps, 1.0).ln()
    }
}

/// Unary cost of assigning `candidate_label` at `(x, y)`, where the
/// reference label is the quantization of `depth` itself.
pub fn unary_cost(
    depth: &DepthMap,
    image: &ImageBuffer,
    x: usize,
    y: usize,
    candidate_label: usize,
    params: &EnergyParams,
) -> f64 {
    let (lo, hi) = depth.min_max();
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let norm = depth.map(|d| (d - lo) / range);
    let reference = quantize(norm.get(x, y), params.labels);
    let s = window_ssim(&norm, &image.luminance(), x, y, params.ssim_radius);
    unary_from_similarity(s, candidate_label == reference, params.labels, params.epsilon)
}

/// Nearest of `labels` evenly spaced levels for a value in `[0, 1]`.
#[inline]
pub fn quantize(normalized: f64, labels: usize) -> usize {
    let top = (labels - 1) as f64;
    (normalized.clamp(0.0, 1.0) * top).round() as usize
}

/// `(1 − exp(−|x_i−x_j|²/2θ_μ²)) · exp(−‖p_i−p_j‖²/2θ_α² − ‖y_i−y_j‖²/2θ_β²)`.
///
/// Depth arguments are labels, colors in kernel units, positions in pixels.
pub fn pairwise_cost(
    x_i: f64,
    x_j: f64,
    pix_i: [f64; 2],
    pix_j: [f64; 2],
    y_i: [f64; 3],
    y_j: [f64; 3],
    params: &EnergyParams,
) -> f64 {
    range_term(x_i - x_j, params.theta_mu) * spatial_color_kernel(pix_i, pix_j, y_i, y_j, params)
}

#[inline]
pub fn range_term(diff: f64, theta_mu: f64) -> f64 {
    1.0 - (-(diff * diff) / (2.0 * theta_mu * theta_mu)).exp()
}

#[inline]
pub fn spatial_color_kernel(
    pix_i: [f64; 2],
    pix_j: [f64; 2],
    y_i: [f64; 3],
    y_j: [f64; 3],
    params: &EnergyParams,
) -> f64 {
    let dp = (pix_i[0] - pix_j[0]).powi(2) + (pix_i[1] - pix_j[1]).powi(2);
    let dc: f64 = (0..3).map(|c| (y_i[c] - y_j[c]).powi(2)).sum();
    (-dp / (2.0 * params.theta_alpha.powi(2)) - dc / (2.0 * params.theta_beta.powi(2))).exp()
}

/// High-frequency residual terms of one image/depth pair.
#[derive(Clone, Debug)]
pub struct HfTerms {
    /// `ψ_h = ‖∇I − ∇D‖²` in `[0, 1]` units.
    pub psi_h: ScalarMap,
    /// `g_u = exp(−‖∇I − ∇D‖²/2τ²)`, gradients in kernel units.
    pub g_u: ScalarMap,
    /// Luminance gradients in kernel units, for `g_p`.
    pub image_grad: Vec<[f64; 2]>,
    pub gamma: f64,
}

impl HfTerms {
    /// `g_p(i, j) = exp(−‖∇I(i) − ∇I(j)‖²/2γ²)` for flat pixel indices.
    pub fn g_p(&self, i: usize, j: usize) -> f64 {
        let a = self.image_grad[i];
        let b = self.image_grad[j];
        let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        (-d / (2.0 * self.gamma * self.gamma)).exp()
    }
}

/// `luma` in `[0, 1]`, `depth` normalized to `[0, 1]`.
pub fn hf_terms(luma: &ScalarMap, depth: &ScalarMap, params: &EnergyParams) -> HfTerms {
    let (w, h) = (luma.width, luma.height);
    let mut psi_h = ScalarMap::zeros(w, h);
    let mut g_u = ScalarMap::zeros(w, h);
    let mut image_grad = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gi = central_gradient(luma, x, y);
            let gd = central_gradient(depth, x, y);
            let r2 = (gi[0] - gd[0]).powi(2) + (gi[1] - gd[1]).powi(2);
            psi_h.set(x, y, r2);
            g_u.set(x, y, hf_weight(r2, params.tau));
            image_grad.push([gi[0] * KERNEL_UNIT, gi[1] * KERNEL_UNIT]);
        }
    }
    HfTerms {
        psi_h,
        g_u,
        image_grad,
        gamma: params.gamma,
    }
}

/// `exp(−‖r‖²/2τ²)` for a squared residual given in `[0, 1]` units.
#[inline]
pub fn hf_weight(residual_sq: f64, tau: f64) -> f64 {
    (-(residual_sq * KERNEL_UNIT * KERNEL_UNIT) / (2.0 * tau * tau)).exp()
}
