//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) and zero
//! padding, plus its gradient w.r.t. the first argument.

use crate::raster::{ImageBuffer, ScalarMap};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable "same" filtering with zero padding. The kernel is symmetric, so
/// this is also its own adjoint.
pub fn filter_same(map: &ScalarMap, kernel: &[f64]) -> ScalarMap {
    let (w, h) = (map.width, map.height);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * map.data[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    ScalarMap::from_vec(w, h, out)
}

fn product(a: &ScalarMap, b: &ScalarMap) -> ScalarMap {
    ScalarMap::from_vec(
        a.width,
        a.height,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

/// Mean SSIM of one channel and, if requested, `d mean / d x`.
pub fn ssim_channel(x: &ScalarMap, y: &ScalarMap, with_grad: bool) -> (f64, Option<ScalarMap>) {
    assert!(x.same_shape(y));
    let k = gaussian_kernel(WINDOW, WINDOW_SIGMA);
    let mx = filter_same(x, &k);
    let my = filter_same(y, &k);
    let exx = filter_same(&product(x, x), &k);
    let eyy = filter_same(&product(y, y), &k);
    let exy = filter_same(&product(x, y), &k);
    let n = x.len();

    let mut total = 0.0;
    let mut d_mx = vec![0.0; n];
    let mut d_exx = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    for p in 0..n {
        let (ux, uy) = (mx.data[p], my.data[p]);
        let a1 = 2.0 * ux * uy + C1;
        let a2 = 2.0 * (exy.data[p] - ux * uy) + C2;
        let b1 = ux * ux + uy * uy + C1;
        let b2 = (exx.data[p] - ux * ux) + (eyy.data[p] - uy * uy) + C2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        total += s;
        if with_grad {
            // dS = (dA1·A2 + A1·dA2)/(B1·B2) − S·(dB1·B2 + B1·dB2)/(B1·B2)
            let ds =
                |da1: f64, da2: f64, db1: f64, db2: f64| (da1 * a2 + a1 * da2) / den - s * (db1 * b2 + b1 * db2) / den;
            d_mx[p] = ds(2.0 * uy, -2.0 * uy, 2.0 * ux, -2.0 * ux);
            d_exx[p] = ds(0.0, 0.0, 0.0, 1.0);
            d_exy[p] = ds(0.0, 2.0, 0.0, 0.0);
        }
    }
    let mean = total / n as f64;
    if !with_grad {
        return (mean, None);
    }
    let (w, h) = (x.width, x.height);
    let f_mx = filter_same(&ScalarMap::from_vec(w, h, d_mx), &k);
    let f_exx = filter_same(&ScalarMap::from_vec(w, h, d_exx), &k);
    let f_exy = filter_same(&ScalarMap::from_vec(w, h, d_exy), &k);
    let inv_n = 1.0 / n as f64;
    let grad = (0..n)
        .map(|q| inv_n * (f_mx.data[q] + 2.0 * x.data[q] * f_exx.data[q] + y.data[q] * f_exy.data[q]))
        .collect();
    (mean, Some(ScalarMap::from_vec(w, h, grad)))
}

/// Mean SSIM over the three channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    (0..3)
        .map(|c| ssim_channel(&a.channel(c), &b.channel(c), false).0)
        .sum::<f64>()
        / 3.0
}

/// Mean SSIM over channels and its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> (f64, ImageBuffer) {
    let mut grad = ImageBuffer::zeros(a.width, a.height);
    let mut total = 0.0;
    for c in 0..3 {
        let (s, g) = ssim_channel(&a.channel(c), &b.channel(c), true);
        total += s / 3.0;
        let g = g.expect("gradient requested");
        for (i, v) in g.data.iter().enumerate() {
            grad.data[i * 3 + c] = v / 3.0;
        }
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use proptest::prelude::*;

    fn random_map(w: usize, h: usize, seed: u64) -> ScalarMap {
        testutil::random_map(w, h, seed, 0.0, 1.0)
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(WINDOW, WINDOW_SIGMA);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn filter_is_self_adjoint() {
        let k = gaussian_kernel(WINDOW, WINDOW_SIGMA);
        let a = random_map(9, 7, 1);
        let b = random_map(9, 7, 2);
        let fa = filter_same(&a, &k);
        let fb = filter_same(&b, &k);
        let lhs: f64 = fa.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data.iter().zip(&fb.data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = random_map(8, 8, 3);
        let y = random_map(8, 8, 4);
        let (_, g) = ssim_channel(&x, &y, true);
        let g = g.unwrap();
        let h = 1e-6;
        for p in [0usize, 9, 27, 63] {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[p] += h;
            b.data[p] -= h;
            let fd = (ssim_channel(&a, &y, false).0 - ssim_channel(&b, &y, false).0) / (2.0 * h);
            assert!(
                (fd - g.data[p]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{fd} vs {}",
                g.data[p]
            );
        }
    }

    proptest! {
        #[test]
        fn self_similarity_is_one(seed in 0u64..1000, w in 1usize..20, h in 1usize..20) {
            let m = random_map(w, h, seed);
            let (s, _) = ssim_channel(&m, &m, false);
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}
