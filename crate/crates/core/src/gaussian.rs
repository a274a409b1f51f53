//! Anisotropic 3D Gaussian primitives and the optimizable set.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Smallest and largest opacity a primitive may hold. Keeps the logit finite.
pub const OPACITY_MIN: f64 = 1e-9;
pub const OPACITY_MAX: f64 = 1.0 - 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One Gaussian splat.
///
/// Opacity is stored as the activated value α ∈ (0, 1); the optimizer works
/// on its logit (see [`GaussianPrimitive::opacity_logit`]). Storing α lets a
/// reset pin it to an exact value such as 0.04, which no f64 logit maps to
/// through the sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; unit norm after every optimizer step.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity: f64,
    /// Degree-0 color coefficient, nominally in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            opacity: opacity.clamp(OPACITY_MIN, OPACITY_MAX),
            color,
        }
    }

    pub fn opacity_logit(&self) -> f64 {
        logit(self.opacity)
    }

    pub fn set_opacity_logit(&mut self, x: f64) {
        self.opacity = sigmoid(x).clamp(OPACITY_MIN, OPACITY_MAX);
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation.normalize())
    }

    /// Σ = R·M·Mᵀ·Rᵀ with M = diag(exp(log_scale)).
    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(self)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// The optimizable scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub primitives: Vec<GaussianPrimitive>,
    /// Bumped whenever primitives are added or removed.
    pub generation_tag: u64,
}

impl GaussianSet {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            generation_tag: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn bump_generation(&mut self) {
        self.generation_tag = self.generation_tag.wrapping_add(1);
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient w.r.t. the rotation matrix back onto the unit quaternion.
pub fn quat_to_matrix_backward(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)];
    let gx = y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)];
    let gy = -2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)];
    let gz = -2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)];
    2.0 * Vector4::new(gw, gx, gy, gz)
}

/// Σ = R·M·Mᵀ·Rᵀ.
pub fn build_covariance(prim: &GaussianPrimitive) -> Matrix3<f64> {
    let m = prim.rotation_matrix() * Matrix3::from_diagonal(&prim.scale());
    m * m.transpose()
}

/// Gradients of a scalar w.r.t. the raw (unnormalized) quaternion and the
/// log-scales, given `dL/dΣ`.
pub fn build_covariance_backward(prim: &GaussianPrimitive, d_cov: &Matrix3<f64>) -> (Vector4<f64>, Vector3<f64>) {
    let norm = prim.rotation.norm();
    let q_hat = prim.rotation / norm;
    let r = quat_to_matrix(&q_hat);
    let s = prim.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let d_m = (d_cov + d_cov.transpose()) * m;

    // M = R·S: dR = dM·S, dS_k = (Rᵀ dM)_kk.
    let d_r = d_m * Matrix3::from_diagonal(&s);
    let rt_dm = r.transpose() * d_m;
    let d_log_scale = Vector3::new(rt_dm[(0, 0)] * s[0], rt_dm[(1, 1)] * s[1], rt_dm[(2, 2)] * s[2]);

    let d_q_hat = quat_to_matrix_backward(&q_hat, &d_r);
    let d_q = (d_q_hat - q_hat * q_hat.dot(&d_q_hat)) / norm;
    (d_q, d_log_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prim(rotation: Vector4<f64>, log_scale: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vector3::zeros(),
            rotation,
            log_scale,
            opacity: 0.5,
            color: Vector3::repeat(0.5),
        }
    }

    #[test]
    fn identity_covariance() {
        let p = prim(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros());
        assert!((build_covariance(&p) - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn scaled_axis_covariance() {
        let p = prim(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(2f64.ln(), 0.0, 0.0));
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((build_covariance(&p) - expected).norm() < 1e-14);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let p = prim(
            Vector4::new(h.cos(), 0.0, 0.0, h.sin()),
            Vector3::new(2f64.ln(), 0.0, 0.0),
        );
        // Hand product: R = [[0,-1,0],[1,0,0],[0,0,1]], R·diag(4,1,1)·Rᵀ.
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let by_hand = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((by_hand - expected).norm() < 1e-15);
        assert!((build_covariance(&p) - expected).norm() < 1e-14);
    }

    #[test]
    fn unnormalized_quaternion_gives_rotation() {
        let p = prim(Vector4::new(2.0, 0.4, -1.0, 0.3), Vector3::zeros());
        let r = p.rotation_matrix();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_and_logit_invert() {
        for &p in &[1e-6, 0.04, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn covariance_backward_matches_central_differences() {
        let p = prim(Vector4::new(0.8, -0.3, 0.5, 0.2), Vector3::new(-0.4, 0.1, 0.3));
        let weight = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.2, -0.4, 1.1, 0.9, -0.6);
        let loss = |p: &GaussianPrimitive| build_covariance(p).component_mul(&weight).sum();
        let (dq, ds) = build_covariance_backward(&p, &weight);
        let h = 1e-6;
        for k in 0..4 {
            let mut a = p.clone();
            let mut b = p.clone();
            a.rotation[k] += h;
            b.rotation[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - dq[k]).abs() < 1e-7, "q[{k}]: {fd} vs {}", dq[k]);
        }
        for k in 0..3 {
            let mut a = p.clone();
            let mut b = p.clone();
            a.log_scale[k] += h;
            b.log_scale[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - ds[k]).abs() < 1e-7, "s[{k}]: {fd} vs {}", ds[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn covariance_is_psd_and_reconstructs(
            q in proptest::array::uniform4(-1.0f64..1.0),
            s in proptest::array::uniform3(-3.0f64..1.0),
        ) {
            let qv = Vector4::from(q);
            prop_assume!(qv.norm() > 1e-3);
            let cov = build_covariance(&prim(qv, Vector3::from(s)));
            prop_assert!((cov - cov.transpose()).norm() < 1e-12);
            let eig = cov.symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() >= -1e-9);
            let rebuilt = eig.recompose();
            prop_assert!((rebuilt - cov).norm() <= 1e-6);
        }
    }
}
