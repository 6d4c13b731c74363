use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::View;
use crate::gauss::{Camera, CameraError};

/// A gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    /// Includes the regularization floor.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub t_cam: Vector3<f64>,
    /// Jacobian of the perspective map at the mean.
    pub jac: Matrix2x3<f64>,
    /// Covariance rotated into camera axes.
    pub cov_cam: Matrix3<f64>,
}

/// Perspective projection of a mean and covariance with EWA linearization:
/// `cov2d = J W Σ Wᵀ Jᵀ + floor·I`. Returns `None` (culled) for points outside
/// the near/far range.
pub fn project(mean: &Vector3<f64>, cov: &Matrix3<f64>, camera: &Camera, cov2d_floor: f64) -> Result<Option<Projection>, CameraError> {
    let view = View::new(camera)?;
    Ok(project_view(mean, cov, &view, cov2d_floor))
}

pub(crate) fn project_view(mean: &Vector3<f64>, cov: &Matrix3<f64>, view: &View, cov2d_floor: f64) -> Option<Projection> {
    let t = view.rotation * (mean - view.origin);
    if !(t.z > view.near && t.z < view.far) {
        return None;
    }
    let (x, y, z) = (t.x, t.y, t.z);
    let jac = Matrix2x3::new(view.fx / z, 0.0, -view.fx * x / (z * z), 0.0, view.fy / z, -view.fy * y / (z * z));
    let cov_cam = view.rotation * cov * view.rotation.transpose();
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 0)] += cov2d_floor;
    cov2d[(1, 1)] += cov2d_floor;
    // exact symmetry
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    Some(Projection {
        mean2d: Vector2::new(view.fx * x / z + view.cx, view.fy * y / z + view.cy),
        cov2d,
        depth: z,
        t_cam: t,
        jac,
        cov_cam,
    })
}
