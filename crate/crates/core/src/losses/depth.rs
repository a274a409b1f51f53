//! Scale-invariant depth supervision: global Pearson correlation and
//! patch-normalized L2.

use log::debug;

use super::LossError;
use crate::raster::{DepthMap, ScalarMap};

/// A scalar loss with its gradient w.r.t. the rendered depth.
#[derive(Clone, Debug)]
pub struct DepthLoss {
    pub value: f64,
    pub grad: DepthMap,
    /// One of the inputs was constant; value and gradient are zero.
    pub degenerate: bool,
}

fn centered(d: &[f64]) -> (Vec<f64>, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let c: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let std = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (c, std)
}

/// `1 − Cov(D_r, D_o) / (σ(D_r)·σ(D_o) + ε)`, population statistics,
/// gradient into `rendered` only.
pub fn pearson_loss(reference: &DepthMap, rendered: &DepthMap, eps: f64) -> Result<DepthLoss, LossError> {
    if !reference.same_shape(rendered) {
        return Err(LossError::ShapeMismatch);
    }
    let n = reference.len() as f64;
    let (rc, sr) = centered(&reference.data);
    let (oc, so) = centered(&rendered.data);
    if sr <= eps || so <= eps {
        debug!("pearson loss skipped: constant depth (σ_r = {sr:e}, σ_o = {so:e})");
        return Ok(DepthLoss {
            value: 0.0,
            grad: DepthMap::zeros(rendered.width, rendered.height),
            degenerate: true,
        });
    }
    let cov = rc.iter().zip(&oc).map(|(a, b)| a * b).sum::<f64>() / n;
    let den = sr * so + eps;
    let corr = cov / den;
    // d corr / d o_k = [r_k/n · den − cov · σ_r · o_k/(n σ_o)] / den²
    let grad = rc
        .iter()
        .zip(&oc)
        .map(|(r, o)| -((r / n) * den - cov * sr * o / (n * so)) / (den * den))
        .collect();
    Ok(DepthLoss {
        value: 1.0 - corr,
        grad: DepthMap::from_vec(rendered.width, rendered.height, grad),
        degenerate: false,
    })
}

/// Patch grid dimensions after cropping to a multiple of `patch_px`.
pub fn patch_grid_dims(width: usize, height: usize, patch_px: usize) -> (usize, usize) {
    (width / patch_px, height / patch_px)
}

fn patch_pixels(px: usize, py: usize, patch_px: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..patch_px).flat_map(move |dy| (0..patch_px).map(move |dx| (px * patch_px + dx, py * patch_px + dy)))
}

/// Per patch: `(D − mean) / (std + ε)` with population std. The output is
/// cropped to the largest multiple of `patch_px`.
pub fn patch_normalize(d: &DepthMap, patch_px: usize, eps: f64) -> DepthMap {
    let (gw, gh) = patch_grid_dims(d.width, d.height, patch_px);
    let mut out = DepthMap::zeros(gw * patch_px, gh * patch_px);
    for py in 0..gh {
        for px in 0..gw {
            let vals: Vec<f64> = patch_pixels(px, py, patch_px).map(|(x, y)| d.get(x, y)).collect();
            let (c, std) = centered(&vals);
            for ((x, y), v) in patch_pixels(px, py, patch_px).zip(c) {
                out.set(x, y, v / (std + eps));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LocalDepthLoss {
    pub value: f64,
    /// Gradient w.r.t. the rendered depth, full (uncropped) resolution.
    pub grad: DepthMap,
    /// Mean squared normalized difference of each patch (grid resolution).
    pub per_patch: ScalarMap,
}

/// Mean squared difference of the patch-normalized maps.
pub fn local_depth_loss(
    reference: &DepthMap,
    rendered: &DepthMap,
    patch_px: usize,
    eps: f64,
) -> Result<LocalDepthLoss, LossError> {
    if !reference.same_shape(rendered) {
        return Err(LossError::ShapeMismatch);
    }
    let (gw, gh) = patch_grid_dims(rendered.width, rendered.height, patch_px);
    if gw == 0 || gh == 0 {
        return Err(LossError::TooSmall { patch_px });
    }
    let n_total = (gw * gh * patch_px * patch_px) as f64;
    let n_patch = (patch_px * patch_px) as f64;
    let mut grad = DepthMap::zeros(rendered.width, rendered.height);
    let mut per_patch = ScalarMap::zeros(gw, gh);
    let mut total = 0.0;
    for py in 0..gh {
        for px in 0..gw {
            let r: Vec<f64> = patch_pixels(px, py, patch_px)
                .map(|(x, y)| reference.get(x, y))
                .collect();
            let o: Vec<f64> = patch_pixels(px, py, patch_px)
                .map(|(x, y)| rendered.get(x, y))
                .collect();
            let (rc, sr) = centered(&r);
            let (oc, so) = centered(&o);
            let rn: Vec<f64> = rc.iter().map(|v| v / (sr + eps)).collect();
            let on: Vec<f64> = oc.iter().map(|v| v / (so + eps)).collect();
            let sq: f64 = rn.iter().zip(&on).map(|(a, b)| (b - a).powi(2)).sum();
            total += sq;
            per_patch.set(px, py, sq / n_patch);

            // g = dL/d on, then through the per-patch standardization.
            let g: Vec<f64> = rn.iter().zip(&on).map(|(a, b)| 2.0 * (b - a) / n_total).collect();
            let g_mean = g.iter().sum::<f64>() / n_patch;
            let g_dot_c: f64 = g.iter().zip(&oc).map(|(a, b)| a * b).sum();
            let den = so + eps;
            for (((x, y), gk), ck) in patch_pixels(px, py, patch_px).zip(&g).zip(&oc) {
                let d_std = if so > 0.0 { ck / (n_patch * so) } else { 0.0 };
                grad.set(x, y, (gk - g_mean) / den - g_dot_c / (den * den) * d_std);
            }
        }
    }
    Ok(LocalDepthLoss {
        value: total / n_total,
        grad,
        per_patch,
    })
}
