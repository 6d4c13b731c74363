use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("vertical field of view must lie in (0, 180) degrees, got {0}")]
    FieldOfView(f64),
    #[error("image size must be at least 1×1, got {0}×{1}")]
    Size(usize, usize),
    #[error("near plane {near} must be positive and below far plane {far}")]
    Clip { near: f64, far: f64 },
    #[error("camera position, target and up vector are degenerate")]
    Degenerate,
}

/// Pinhole camera. Camera space is x right, y down, z forward; pixel centers
/// sit at half-integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub vertical_fov_degrees: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(position: Vector3<f64>, look_at: Vector3<f64>, fov_degrees: f64, width: usize, height: usize) -> Self {
        Self {
            position: position.into(),
            look_at: look_at.into(),
            up: [0.0, 1.0, 0.0],
            vertical_fov_degrees: fov_degrees,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Camera on a sphere around `target`. Azimuth 0 looks down −z from the
    /// +z side; elevation is positive above the xz-plane.
    pub fn orbit(
        target: Vector3<f64>,
        radius: f64,
        elevation_degrees: f64,
        azimuth_degrees: f64,
        fov_degrees: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (el, az) = (elevation_degrees.to_radians(), azimuth_degrees.to_radians());
        let offset = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
        Self::new(target + offset, target, fov_degrees, width, height)
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.vertical_fov_degrees > 0.0 && self.vertical_fov_degrees < 180.0) {
            return Err(CameraError::FieldOfView(self.vertical_fov_degrees));
        }
        if self.width < 1 || self.height < 1 {
            return Err(CameraError::Size(self.width, self.height));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(CameraError::Clip { near: self.near, far: self.far });
        }
        let f = self.target() - self.origin();
        if f.norm() == 0.0 || f.cross(&Vector3::from(self.up)).norm() < 1e-12 {
            return Err(CameraError::Degenerate);
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.look_at)
    }

    /// World-to-camera rotation; rows are the right, down and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        let f = (self.target() - self.origin()).normalize();
        let r = f.cross(&Vector3::from(self.up)).normalize();
        let d = f.cross(&r);
        Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()])
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (world - self.origin())
    }

    /// Focal lengths and principal point in pixels: `(fx, fy, cx, cy)`.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let fy = 0.5 * self.height as f64 / (0.5 * self.vertical_fov_degrees.to_radians()).tan();
        (fy, fy, 0.5 * self.width as f64, 0.5 * self.height as f64)
    }
}
