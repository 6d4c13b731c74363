//! Human and object motion fields.
//!
//! Human points follow the LBS matrix of their nearest canonical body vertex
//! plus a hexplane offset. The object follows the entrywise mean `Ḡ'` of its
//! points' vertex matrices (applied as-is, not re-orthonormalized), then a
//! trainable residual `x ↦ R x + T`.
//!
//! The correspondence loss compares, per object point, the bound vertex's
//! matrix `G_c` with a soft assignment `G_o = Σ_j w_j G_j` over the `k`
//! nearest posed vertices, `w = softmax(−d²/τ)`, on the top 3×4 block. The
//! soft form makes the loss differentiable in the point positions; the hard
//! nearest-vertex form is available for evaluation.

mod winding;

pub use winding::{penetration_fraction, winding_number};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{nearest_vertices, BodyError, KdTree, PosedBody};
use crate::hexplane::HexPlaneField;
use crate::math::{self, Quat};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("binding has {bound} points but {given} were supplied")]
    Unbound { bound: usize, given: usize },
    #[error("object binding is empty")]
    EmptyBinding,
    #[error("soft-assignment temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("soft-assignment neighbour count must be at least 1")]
    NeighborCount,
}

/// Nearest canonical body vertex per point, fixed at bind time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub vertices: Vec<usize>,
}

impl Binding {
    pub fn new(points: &[Vector3<f64>], canonical_vertices: &[Vector3<f64>]) -> Result<Self, MotionError> {
        let nn = nearest_vertices(points, canonical_vertices, 1)?;
        Ok(Self { vertices: nn.indices })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn check(&self, n: usize) -> Result<(), MotionError> {
        if n != self.vertices.len() {
            return Err(MotionError::Unbound { bound: self.vertices.len(), given: n });
        }
        Ok(())
    }
}

/// `G_v x + MLP(F(x, t))` per point.
pub fn human_deform(
    points: &[Vector3<f64>],
    binding: &Binding,
    posed: &PosedBody,
    field: Option<&HexPlaneField>,
    t: f64,
) -> Result<Vec<Vector3<f64>>, MotionError> {
    binding.check(points.len())?;
    let mut out: Vec<Vector3<f64>> = points
        .iter()
        .zip(&binding.vertices)
        .map(|(x, &v)| posed.vertex_matrix(v).map(|m| math::transform_point(m, x)))
        .collect::<Result<_, _>>()?;
    if let Some(f) = field {
        for (o, d) in out.iter_mut().zip(f.offsets(points, t)) {
            *o += d;
        }
    }
    Ok(out)
}

/// Rotation applied to each human gaussian's covariance: the polar factor of
/// its vertex matrix.
pub fn human_rotations(binding: &Binding, posed: &PosedBody) -> Result<Vec<Matrix3<f64>>, MotionError> {
    binding.vertices.iter().map(|&v| Ok(math::polar_rotation(&math::linear_part(posed.vertex_matrix(v)?)))).collect()
}

/// Entrywise mean of the bound vertices' LBS matrices.
pub fn object_base_transform(binding: &Binding, posed: &PosedBody) -> Result<Matrix4<f64>, MotionError> {
    if binding.is_empty() {
        return Err(MotionError::EmptyBinding);
    }
    let mut m = Matrix4::zeros();
    for &v in &binding.vertices {
        m += posed.vertex_matrix(v)?;
    }
    m /= binding.len() as f64;
    m[(3, 0)] = 0.0;
    m[(3, 1)] = 0.0;
    m[(3, 2)] = 0.0;
    m[(3, 3)] = 1.0;
    Ok(m)
}

/// Trainable residual `x ↦ R x + T`; `rotation` is stored raw and used
/// normalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualTransform {
    pub rotation: Quat,
    pub translation: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualGrad {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl ResidualGrad {
    pub fn add(&mut self, o: &ResidualGrad) {
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.translation += o.translation;
    }

    pub fn scaled(&self, s: f64) -> ResidualGrad {
        ResidualGrad { rotation: self.rotation.map(|v| v * s), translation: self.translation * s }
    }
}

impl Default for ResidualTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ResidualTransform {
    pub fn identity() -> Self {
        Self { rotation: math::IDENTITY_QUAT, translation: [0.0; 3] }
    }

    pub fn new(rotation: Quat, translation: Vector3<f64>) -> Self {
        Self { rotation, translation: translation.into() }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        math::quat_to_matrix(&math::quat_normalize(&self.rotation))
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    pub fn apply(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let r = self.rotation_matrix();
        let t = Vector3::from(self.translation);
        points.iter().map(|p| r * p + t).collect()
    }

    pub fn as_matrix(&self) -> Matrix4<f64> {
        math::homogeneous(&self.rotation_matrix(), &Vector3::from(self.translation))
    }

    /// `∂x'/∂q_raw` (3×4) at point `p`; `∂x'/∂T` is the identity.
    pub fn jacobian(&self, p: &Vector3<f64>) -> Matrix3x4<f64> {
        let q = math::quat_normalize(&self.rotation);
        let parts = math::quat_to_matrix_partials(&q);
        let mut j = Matrix3x4::zeros();
        for k in 0..4 {
            j.set_column(k, &(parts[k] * p));
        }
        // through q = raw/|raw|
        let n = math::quat_norm(&self.rotation);
        let qv = Vector4::from(q);
        let proj = (nalgebra::Matrix4::identity() - qv * qv.transpose()) / n;
        j * proj
    }

    /// Pulls gradients on `R p_i + T` back to the raw quaternion and `T`.
    /// `extra_rotation` adds a gradient with respect to the unit quaternion
    /// (e.g. from rotated covariances).
    pub fn pullback(&self, points: &[Vector3<f64>], d_points: &[Vector3<f64>], extra_rotation: Option<&Quat>) -> ResidualGrad {
        let q = math::quat_normalize(&self.rotation);
        let mut d_r = Matrix3::zeros();
        let mut d_t = Vector3::zeros();
        for (p, g) in points.iter().zip(d_points) {
            d_r += g * p.transpose();
            d_t += g;
        }
        let mut d_q = math::matrix_grad_to_quat(&q, &d_r);
        if let Some(e) = extra_rotation {
            for k in 0..4 {
                d_q[k] += e[k];
            }
        }
        ResidualGrad { rotation: math::normalize_pullback(&self.rotation, &d_q), translation: d_t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    pub k: usize,
    /// Soft-assignment temperature, m².
    pub tau: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self { k: 8, tau: 0.01 }
    }
}

/// A posed body with a spatial index over its posed vertices.
pub struct PosedIndex {
    pub posed: PosedBody,
    pub tree: KdTree,
}

impl PosedIndex {
    pub fn new(posed: PosedBody) -> Self {
        let tree = KdTree::new(&posed.vertices);
        Self { posed, tree }
    }
}

fn top_block(m: &Matrix4<f64>) -> Matrix3x4<f64> {
    m.fixed_view::<3, 4>(0, 0).into_owned()
}

/// Soft correspondence loss and its gradient with respect to each
/// transformed point.
#[derive(Clone, Debug)]
pub struct CorrespondenceLoss {
    pub value: f64,
    pub d_points: Vec<Vector3<f64>>,
}

pub fn correspondence_loss(
    binding: &Binding,
    index: &PosedIndex,
    points: &[Vector3<f64>],
    cfg: &CorrespondenceConfig,
) -> Result<CorrespondenceLoss, MotionError> {
    if !(cfg.tau > 0.0) {
        return Err(MotionError::Temperature(cfg.tau));
    }
    if cfg.k == 0 {
        return Err(MotionError::NeighborCount);
    }
    binding.check(points.len())?;
    if binding.is_empty() {
        return Err(MotionError::EmptyBinding);
    }
    let posed = &index.posed;
    let k = cfg.k.min(posed.vertices.len());
    let m = points.len() as f64;
    let mut value = 0.0;
    let mut d_points = Vec::with_capacity(points.len());
    for (x, &bound) in points.iter().zip(&binding.vertices) {
        let g_c = top_block(posed.vertex_matrix(bound)?);
        let nn = index.tree.nearest(x, k);
        // softmax over −d²/τ, shifted by the smallest d² for stability
        let d2: Vec<f64> = nn.iter().map(|&(j, _)| (posed.vertices[j] - x).norm_squared()).collect();
        let d2_min = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = d2.iter().map(|d| (-(d - d2_min) / cfg.tau).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut g_o = Matrix3x4::zeros();
        for (&(j, _), wj) in nn.iter().zip(&w) {
            g_o += *wj * top_block(&posed.vertex_matrices[j]);
        }
        let diff = g_c - g_o;
        value += diff.norm_squared() / m;
        // dℓ/dw_j = −2⟨diff, G_j⟩ / M
        let dl_dw: Vec<f64> = nn.iter().map(|&(j, _)| -2.0 * diff.dot(&top_block(&posed.vertex_matrices[j])) / m).collect();
        let mean_dw: f64 = dl_dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        // dw_j/dd²_m = −w_j(δ_jm − w_m)/τ, dd²_m/dx = 2(x − v_m)
        let mut g = Vector3::zeros();
        for (i, &(j, _)) in nn.iter().enumerate() {
            let dl_dd2 = -w[i] * (dl_dw[i] - mean_dw) / cfg.tau;
            g += dl_dd2 * 2.0 * (x - posed.vertices[j]);
        }
        d_points.push(g);
    }
    Ok(CorrespondenceLoss { value, d_points })
}

/// Hard variant: `G_o` is the single nearest posed vertex's matrix.
pub fn correspondence_loss_hard(binding: &Binding, index: &PosedIndex, points: &[Vector3<f64>]) -> Result<f64, MotionError> {
    binding.check(points.len())?;
    if binding.is_empty() {
        return Err(MotionError::EmptyBinding);
    }
    let posed = &index.posed;
    let mut value = 0.0;
    for (x, &bound) in points.iter().zip(&binding.vertices) {
        let (j, _) = index.tree.nearest(x, 1)[0];
        value += (top_block(posed.vertex_matrix(bound)?) - top_block(&posed.vertex_matrices[j])).norm_squared();
    }
    Ok(value / points.len() as f64)
}

/// Object points at one frame: `R (Ḡ' x) + T`, also returning `Ḡ' x`.
pub fn object_points(
    canonical: &[Vector3<f64>],
    base: &Matrix4<f64>,
    residual: &ResidualTransform,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let moved: Vec<_> = canonical.iter().map(|p| math::transform_point(base, p)).collect();
    (residual.apply(&moved), moved)
}

/// L_CA and its residual gradient at one frame.
pub fn correspondence_residual_grad(
    binding: &Binding,
    index: &PosedIndex,
    canonical: &[Vector3<f64>],
    residual: &ResidualTransform,
    cfg: &CorrespondenceConfig,
) -> Result<(f64, ResidualGrad), MotionError> {
    let base = object_base_transform(binding, &index.posed)?;
    let (pts, moved) = object_points(canonical, &base, residual);
    let loss = correspondence_loss(binding, index, &pts, cfg)?;
    Ok((loss.value, residual.pullback(&moved, &loss.d_points, None)))
}

#[cfg(test)]
mod tests;
