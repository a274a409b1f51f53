//! Screen-space projection of 3D Gaussians (EWA splatting with the local
//! affine approximation of the perspective map).

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussian::GaussianPrimitive;

/// Added to the diagonal of every projected covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum ProjectError {
    #[error("primitive is behind the camera (view z = {0})")]
    BehindCamera(f64),
}

/// A primitive as seen by one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    /// J·W·Σ·Wᵀ·Jᵀ plus the low-pass floor.
    pub cov2d: Matrix2<f64>,
    pub view_depth: f64,
    pub view_mean: Vector3<f64>,
    /// Σ of the primitive in world space, kept for the backward pass.
    pub cov3d: Matrix3<f64>,
}

#[inline]
fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (t.x, t.y, t.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

pub fn project_gaussian(prim: &GaussianPrimitive, cam: &Camera) -> Result<Projected, ProjectError> {
    let t = cam.world_to_view(&prim.position);
    if t.z <= 0.0 {
        return Err(ProjectError::BehindCamera(t.z));
    }
    let cov3d = prim.covariance();
    let j = perspective_jacobian(cam, &t);
    let view_cov = cam.rotation * cov3d * cam.rotation.transpose();
    let mut cov2d = j * view_cov * j.transpose();
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    // Symmetrize away rounding asymmetry.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    Ok(Projected {
        mean2d: cam.view_to_pixel(&t),
        cov2d,
        view_depth: t.z,
        view_mean: t,
        cov3d,
    })
}

/// Gradients of the projection outputs pulled back to world position and Σ.
pub struct ProjectionGrad {
    pub position: Vector3<f64>,
    pub cov3d: Matrix3<f64>,
}

/// `d_cov2d` is the gradient w.r.t. the full 2×2 matrix (both off-diagonal
/// entries treated as independent).
pub fn project_gaussian_backward(
    proj: &Projected,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
    d_view_depth: f64,
) -> ProjectionGrad {
    let t = proj.view_mean;
    let (x, y, z) = (t.x, t.y, t.z);
    let w = &cam.rotation;
    let j = perspective_jacobian(cam, &t);
    let view_cov = w * proj.cov3d * w.transpose();

    let d_view_cov = j.transpose() * d_cov2d * j;
    let d_cov3d = w.transpose() * d_view_cov * w;
    let d_j = (d_cov2d + d_cov2d.transpose()) * j * view_cov;

    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_t = j.transpose() * d_mean2d;
    d_t.x += d_j[(0, 2)] * (-cam.fx / z2);
    d_t.y += d_j[(1, 2)] * (-cam.fy / z2);
    d_t.z += d_j[(0, 0)] * (-cam.fx / z2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x / z3)
        + d_j[(1, 1)] * (-cam.fy / z2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y / z3)
        + d_view_depth;

    ProjectionGrad {
        position: w.transpose() * d_t,
        cov3d: d_cov3d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;

    fn axis_camera(f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: 16.0,
            cy: 16.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 32,
            height: 32,
            near: 0.1,
            far: 100.0,
        }
    }

    fn prim_at(p: Vector3<f64>, log_scale: Vector3<f64>, q: Vector4<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            position: p,
            rotation: q,
            log_scale,
            opacity: 0.7,
            color: Vector3::new(0.2, 0.4, 0.6),
        }
    }

    #[test]
    fn isotropic_on_axis() {
        let (f, sigma, z) = (50.0, 0.2f64, 4.0);
        let p = prim_at(
            Vector3::new(0.0, 0.0, z),
            Vector3::repeat(sigma.ln()),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
        );
        let proj = project_gaussian(&p, &axis_camera(f)).unwrap();
        let expected = (f * sigma / z).powi(2);
        assert!((proj.cov2d[(0, 0)] - COV2D_FLOOR - expected).abs() < 1e-12);
        assert!((proj.cov2d[(1, 1)] - COV2D_FLOOR - expected).abs() < 1e-12);
        assert!(proj.cov2d[(0, 1)].abs() < 1e-14);
        assert_eq!(proj.view_depth, z);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = axis_camera(50.0);
        for z in [0.0, -1.0, -10.0] {
            let p = prim_at(
                Vector3::new(0.1, 0.0, z),
                Vector3::zeros(),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
            );
            assert!(matches!(project_gaussian(&p, &cam), Err(ProjectError::BehindCamera(_))));
        }
    }

    #[test]
    fn rigid_translation_invariance() {
        let cam = Camera::look_at(
            Vector3::new(1.0, 2.0, -5.0),
            Vector3::new(0.1, 0.0, 0.2),
            Vector3::new(0.0, 1.0, 0.0),
            0.9,
            40,
            30,
            0.5,
            20.0,
        );
        let p = prim_at(
            Vector3::new(0.2, -0.3, 0.4),
            Vector3::new(-1.0, -1.5, -0.7),
            Vector4::new(0.9, 0.1, -0.2, 0.3),
        );
        let offset = Vector3::new(3.0, -7.0, 11.0);
        let mut moved = p.clone();
        moved.position += offset;
        let a = project_gaussian(&p, &cam).unwrap();
        let b = project_gaussian(&moved, &cam.translated(&offset)).unwrap();
        assert!((a.mean2d - b.mean2d).norm() < 1e-9);
        assert!((a.cov2d - b.cov2d).norm() < 1e-9);
        assert!((a.view_depth - b.view_depth).abs() < 1e-12);
    }

    /// cov2d against propagation through a central-difference Jacobian of
    /// the pinhole map (h = 1e-4 in view units).
    #[test]
    fn cov2d_matches_numeric_jacobian() {
        let cam = Camera::look_at(
            Vector3::new(-2.0, 1.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            1.0,
            64,
            48,
            0.5,
            20.0,
        );
        let p = prim_at(
            Vector3::new(0.5, -0.4, 0.3),
            Vector3::new(-1.2, -0.8, -1.6),
            Vector4::new(0.7, 0.3, -0.5, 0.2),
        );
        let proj = project_gaussian(&p, &cam).unwrap();
        let t = cam.world_to_view(&p.position);
        let h = 1e-4;
        let pix = |v: Vector3<f64>| cam.view_to_pixel(&v);
        let mut jn = Matrix2x3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let d = (pix(t + e) - pix(t - e)) / (2.0 * h);
            jn[(0, k)] = d.x;
            jn[(1, k)] = d.y;
        }
        let v = cam.rotation * p.covariance() * cam.rotation.transpose();
        let numeric = jn * v * jn.transpose();
        let analytic = proj.cov2d - Matrix2::identity() * COV2D_FLOOR;
        let rel = (numeric - analytic).norm() / analytic.norm();
        assert!(rel <= 1e-3, "relative error {rel}");
        assert_eq!(proj.view_depth, t.z);
    }

    #[test]
    fn backward_matches_central_differences() {
        let cam = Camera::look_at(
            Vector3::new(1.5, -0.5, -3.5),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            1.1,
            64,
            48,
            0.5,
            20.0,
        );
        let p = prim_at(
            Vector3::new(0.3, 0.2, -0.1),
            Vector3::new(-1.0, -1.3, -0.6),
            Vector4::new(0.6, -0.2, 0.4, 0.5),
        );
        let wm = Vector2::new(0.7, -1.3);
        let wc = Matrix2::new(0.4, -0.2, 0.9, 0.3);
        let wd = 0.8;
        let loss = |p: &GaussianPrimitive| {
            let pr = project_gaussian(p, &cam).unwrap();
            pr.mean2d.dot(&wm) + pr.cov2d.component_mul(&wc).sum() + wd * pr.view_depth
        };
        let proj = project_gaussian(&p, &cam).unwrap();
        let g = project_gaussian_backward(&proj, &cam, &wm, &wc, wd);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p.clone();
            let mut b = p.clone();
            a.position[k] += h;
            b.position[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!(
                (fd - g.position[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                "{fd} vs {}",
                g.position[k]
            );
        }
        // Σ: perturb symmetric pairs through the full-matrix gradient.
        let (dq, ds) = crate::gaussian::build_covariance_backward(&p, &g.cov3d);
        for k in 0..3 {
            let mut a = p.clone();
            let mut b = p.clone();
            a.log_scale[k] += h;
            b.log_scale[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - ds[k]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for k in 0..4 {
            let mut a = p.clone();
            let mut b = p.clone();
            a.rotation[k] += h;
            b.rotation[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - dq[k]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
