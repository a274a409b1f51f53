//! Pinhole camera with a rigid world-to-camera transform.
//!
//! Camera axes follow the usual vision convention: `x` right, `y` down,
//! `z` forward. Pixel `(i, j)` has its center at image coordinates
//! `(i, j)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("near plane must be positive and below far (near={near}, far={far})")]
    DepthBounds { near: f64, far: f64 },
    #[error("world-to-camera rotation is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("camera resolution must be non-zero")]
    EmptyResolution,
    #[error("focal lengths must be positive")]
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation block of the world-to-camera transform (`W`).
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` the world up direction
    /// and `fov_x` the horizontal field of view in radians.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            rotation,
            translation,
            width,
            height,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(CameraError::DepthBounds {
                near: self.near,
                far: self.far,
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::EmptyResolution);
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::Focal);
        }
        let dev = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if dev > 1e-6 {
            return Err(CameraError::NotOrthonormal(dev));
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a view-space point (requires `z > 0`).
    #[inline]
    pub fn view_to_pixel(&self, v: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * v.x / v.z + self.cx, self.fy * v.y / v.z + self.cy)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let v = self.world_to_view(p);
        (v.z > 0.0).then(|| (self.view_to_pixel(&v), v.z))
    }

    /// World-space point on the ray through pixel `(u, v)` at view depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let view = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation.transpose() * (view - self.translation)
    }

    /// Copy of this camera translated with the scene by `offset` (world).
    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let mut c = self.clone();
        c.translation -= self.rotation * offset;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            0.8,
            32,
            24,
            0.5,
            10.0,
        )
    }

    #[test]
    fn look_at_is_valid_and_centers_target() {
        let c = cam();
        c.validate().unwrap();
        let (px, z) = c.project(&Vector3::zeros()).unwrap();
        assert!((px.x - c.cx).abs() < 1e-12 && (px.y - c.cy).abs() < 1e-12);
        assert!((z - 4.0).abs() < 1e-12);
        assert!((c.center() - Vector3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
        // World up maps to image up (smaller row index).
        let (up_px, _) = c.project(&Vector3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(up_px.y < c.cy);
    }

    #[test]
    fn unproject_inverts_project() {
        let c = cam();
        let p = Vector3::new(0.3, -0.2, 0.7);
        let (px, z) = c.project(&p).unwrap();
        assert!((c.unproject(px.x, px.y, z) - p).norm() < 1e-12);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut c = cam();
        c.near = 0.0;
        assert!(matches!(c.validate(), Err(CameraError::DepthBounds { .. })));
        let mut c = cam();
        c.far = 0.4;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[(0, 0)] += 1e-3;
        assert!(matches!(c.validate(), Err(CameraError::NotOrthonormal(_))));
    }
}
