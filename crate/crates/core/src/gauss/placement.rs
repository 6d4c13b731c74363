//! Global similarity placement of a cloud: `x' = S·(R x + T) + anchor`.
//!
//! The placement is written with column vectors. A row-vector formula
//! `S·(X·R + T)` maps to this one with `R` replaced by its transpose; the
//! trainable quaternion is the same parameter either way. The `anchor` is a
//! fixed offset (the contact-retargeting translation), so `T` stays a residual
//! that starts at zero.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{GaussError, GaussianCloud};
use crate::math::{self, Quat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scale: f64,
    /// Raw (possibly unnormalized) rotation parameter `[w, x, y, z]`.
    pub rotation: Quat,
    pub translation: [f64; 3],
    #[serde(default)]
    pub anchor: [f64; 3],
}

/// Gradients of a scalar loss with respect to the placement parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlacementGrad {
    pub scale: f64,
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

/// Jacobian of one placed mean with respect to `(S, raw R, T)`.
#[derive(Clone, Debug)]
pub struct PlacementJacobian {
    pub d_scale: Vector3<f64>,
    pub d_rotation: Matrix3x4<f64>,
    pub d_translation: Matrix3<f64>,
}

impl Default for Placement {
    fn default() -> Self {
        Self::identity()
    }
}

impl Placement {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: math::IDENTITY_QUAT, translation: [0.0; 3], anchor: [0.0; 3] }
    }

    pub fn new(scale: f64, rotation: Quat, translation: Vector3<f64>) -> Self {
        Self { scale, rotation, translation: translation.into(), anchor: [0.0; 3] }
    }

    pub fn unit_rotation(&self) -> Quat {
        math::quat_normalize(&self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        math::quat_to_matrix(&self.unit_rotation())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn anchor(&self) -> Vector3<f64> {
        Vector3::from(self.anchor)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation_matrix() * x + self.translation()) + self.anchor()
    }

    /// Composite placement equal to applying `self` first and `next` second,
    /// for anchor-free placements.
    pub fn then(&self, next: &Placement) -> Placement {
        let q = math::quat_mul(&next.unit_rotation(), &self.unit_rotation());
        let t = next.rotation_matrix() * self.translation() + next.translation() / self.scale;
        Placement { scale: self.scale * next.scale, rotation: q, translation: t.into(), anchor: [0.0; 3] }
    }

    pub fn mean_jacobian(&self, x: &Vector3<f64>) -> PlacementJacobian {
        let q = self.unit_rotation();
        let r = math::quat_to_matrix(&q);
        let parts = math::quat_to_matrix_partials(&q);
        let mut d_unit = Matrix3x4::zeros();
        for k in 0..4 {
            d_unit.set_column(k, &(self.scale * parts[k] * x));
        }
        // chain through q = raw / |raw|
        let n = math::quat_norm(&self.rotation);
        let qv = Vector4::from(q);
        let proj = (nalgebra::Matrix4::identity() - qv * qv.transpose()) / n;
        PlacementJacobian {
            d_scale: r * x + self.translation(),
            d_rotation: d_unit * proj,
            d_translation: Matrix3::identity() * self.scale,
        }
    }

    /// Pulls gradients on the placed cloud's means, rotations and scales back
    /// to the placement parameters. `base` is the unplaced cloud.
    pub fn pullback(
        &self,
        base: &GaussianCloud,
        d_means: &[Vector3<f64>],
        d_rotations: &[Quat],
        d_scales: &[Vector3<f64>],
    ) -> PlacementGrad {
        let q = self.unit_rotation();
        let r = math::quat_to_matrix(&q);
        let t = self.translation();
        let mut d_r_matrix = Matrix3::zeros();
        let mut d_unit_q = [0.0; 4];
        let mut grad = PlacementGrad::default();
        for (i, x) in base.means.iter().enumerate() {
            let g = d_means[i];
            grad.scale += g.dot(&(r * x + t));
            grad.translation += self.scale * g;
            d_r_matrix += self.scale * g * x.transpose();
        }
        // placed rotation = q ⊗ q_i, so d/dq = Rmat(q_i)ᵀ · d/d(q ⊗ q_i)
        for (i, qi) in base.rotations.iter().enumerate() {
            let m = math::quat_right_matrix(qi).transpose() * Vector4::from(d_rotations[i]);
            for k in 0..4 {
                d_unit_q[k] += m[k];
            }
        }
        for (i, s) in base.scales.iter().enumerate() {
            grad.scale += d_scales[i].dot(s);
        }
        let from_matrix = math::matrix_grad_to_quat(&q, &d_r_matrix);
        for k in 0..4 {
            d_unit_q[k] += from_matrix[k];
        }
        grad.rotation = math::normalize_pullback(&self.rotation, &d_unit_q);
        grad
    }
}

/// Places a cloud by `x' = S·(R x + T)`: rotations are left-composed with `R`,
/// scales multiplied by `S`, opacities and colors untouched.
pub fn apply_placement(cloud: &GaussianCloud, scale: f64, rotation: &Quat, translation: &Vector3<f64>) -> Result<GaussianCloud, GaussError> {
    Placement::new(scale, *rotation, *translation).apply(cloud)
}

impl Placement {
    pub fn apply(&self, cloud: &GaussianCloud) -> Result<GaussianCloud, GaussError> {
        if !(self.scale > 0.0) {
            return Err(GaussError::NonPositivePlacementScale(self.scale));
        }
        if self.is_identity() {
            return Ok(cloud.clone());
        }
        let q = self.unit_rotation();
        let r = math::quat_to_matrix(&q);
        let (t, a) = (self.translation(), self.anchor());
        let mut out = cloud.clone();
        for m in &mut out.means {
            *m = self.scale * (r * *m + t) + a;
        }
        for rot in &mut out.rotations {
            *rot = math::quat_normalize(&math::quat_mul(&q, rot));
        }
        for s in &mut out.scales {
            *s *= self.scale;
        }
        Ok(out)
    }

    fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation == math::IDENTITY_QUAT && self.translation == [0.0; 3] && self.anchor == [0.0; 3]
    }
}
