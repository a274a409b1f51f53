//! Training losses and evaluation metrics.

mod depth;
pub mod ssim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

pub use depth::{local_depth_loss, patch_grid_dims, patch_normalize, pearson_loss, DepthLoss, LocalDepthLoss};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("input rasters have different shapes")]
    ShapeMismatch,
    #[error("raster smaller than one {patch_px}px patch")]
    TooSmall { patch_px: usize },
}

/// Scalar weights of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// D-SSIM weight inside the color loss.
    pub beta: f64,
    /// Weight of the local (patch-normalized) depth term.
    pub lambda: f64,
    /// Initial weight of the relative depth guidance loss.
    pub omega0: f64,
    pub epsilon: f64,
    /// Schedule horizon `m` (training steps).
    pub horizon: u64,
    /// Depth and guidance terms only contribute for `t > depth_warmup`.
    pub depth_warmup: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.4,
            lambda: 0.1,
            omega0: 0.05,
            epsilon: 1e-6,
            horizon: 6000,
            depth_warmup: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub value: f64,
    pub grad: ImageBuffer,
}

/// `L1(I_o, I_g) + β·(1 − SSIM(I_o, I_g)) / 2`, gradient w.r.t. `rendered`.
pub fn color_loss(rendered: &ImageBuffer, target: &ImageBuffer, beta: f64) -> Result<ImageLoss, LossError> {
    if !rendered.same_shape(target) {
        return Err(LossError::ShapeMismatch);
    }
    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = ImageBuffer::zeros(rendered.width, rendered.height);
    for ((g, &a), &b) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = a - b;
        l1 += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    let mut value = l1 / n;
    if beta != 0.0 {
        let (s, g_ssim) = ssim::ssim_with_grad(rendered, target);
        value += beta * (1.0 - s) * 0.5;
        for (g, gs) in grad.data.iter_mut().zip(&g_ssim.data) {
            *g -= 0.5 * beta * gs;
        }
    }
    Ok(ImageLoss { value, grad })
}

/// Component losses of one view. `None` means the term was not evaluated.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub l_color: f64,
    pub l_g: Option<f64>,
    pub l_l: Option<f64>,
    pub l_rdg: Option<f64>,
    pub per_patch_depth: Option<ScalarMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_color: f64,
    pub l_g: Option<f64>,
    pub l_l: Option<f64>,
    pub l_depth: Option<f64>,
    pub l_rdg: Option<f64>,
    pub omega: f64,
    pub total: f64,
    #[serde(skip)]
    pub per_patch_depth: Option<ScalarMap>,
}

/// Compose the objective `L_color + L_depth + ω·L_rdg` at step `t`.
///
/// `L_depth = L_g + λ·L_l`. Depth and guidance terms are dropped while
/// `t ≤ depth_warmup`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, omega: f64, t: u64) -> LossReport {
    let active = t > weights.depth_warmup;
    let l_depth = if active && (parts.l_g.is_some() || parts.l_l.is_some()) {
        Some(parts.l_g.unwrap_or(0.0) + weights.lambda * parts.l_l.unwrap_or(0.0))
    } else {
        None
    };
    let l_rdg = if active { parts.l_rdg } else { None };
    let total = parts.l_color + l_depth.unwrap_or(0.0) + omega * l_rdg.unwrap_or(0.0);
    LossReport {
        l_color: parts.l_color,
        l_g: if active { parts.l_g } else { None },
        l_l: if active { parts.l_l } else { None },
        l_depth,
        l_rdg,
        omega,
        total,
        per_patch_depth: parts.per_patch_depth.clone(),
    }
}

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        20.0 * (1.0 / mse.sqrt()).log10()
    }
}

/// `√(1/N Σ (x_i − x_i*)²)`.
pub fn rmse(a: &DepthMap, b: &DepthMap) -> f64 {
    (a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// RMSE after the least-squares affine fit `a·pred + b ≈ target`. A
/// constant `pred` is fitted by its mean.
pub fn affine_aligned_rmse(pred: &DepthMap, target: &DepthMap) -> f64 {
    let n = pred.len() as f64;
    let (mp, mt) = (pred.mean(), target.mean());
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (p, t) in pred.data.iter().zip(&target.data) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
    }
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = mt - a * mp;
    (pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (a * p + b - t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

pub fn metrics(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    rendered_depth: &DepthMap,
    gt_depth: &DepthMap,
) -> Result<Metrics, LossError> {
    if !rendered.same_shape(target) || !rendered_depth.same_shape(gt_depth) {
        return Err(LossError::ShapeMismatch);
    }
    Ok(Metrics {
        psnr: psnr(rendered, target),
        ssim: ssim::ssim(rendered, target),
        rmse: rmse(rendered_depth, gt_depth),
    })
}
