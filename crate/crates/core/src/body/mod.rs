//! Generic skinned body: blend shapes, forward kinematics and linear blend
//! skinning.
//!
//! Joint transforms are in rest-relative form, `G_k = world_k · rest_world_k⁻¹`,
//! with the root translation folded in on the left. Since skin-weight rows sum
//! to one, `Σ_k w_k G_k x` equals posing `x` and then adding the root
//! translation.

mod asset;
mod knn;
mod motion;

pub use asset::{BasisData, BodyAsset};
pub use knn::{brute_force_knn, nearest_vertices, KdTree, Neighbors};
pub use motion::{MotionFrame, MotionSequence};

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::math::{axis_angle_to_matrix, homogeneous, transform_point};

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("body i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("body json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid body: {0}")]
    Invalid(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("vertex index {index} out of range for {count} vertices")]
    VertexIndex { index: usize, count: usize },
    #[error("nearest-neighbour query needs at least one vertex")]
    EmptyVertices,
    #[error("k = {k} exceeds the {count} available vertices")]
    TooManyNeighbors { k: usize, count: usize },
}

/// Linear basis stored as `V × 3 × n`, flattened row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Basis {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Basis {
    fn apply(&self, coeffs: &[f64], out: &mut [Vector3<f64>]) {
        if self.n == 0 {
            return;
        }
        for (v, o) in out.iter_mut().enumerate() {
            for c in 0..3 {
                let row = &self.data[(v * 3 + c) * self.n..(v * 3 + c + 1) * self.n];
                o[c] += row.iter().zip(coeffs).map(|(b, x)| b * x).sum::<f64>();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkinnedBody {
    pub template_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub parents: Vec<Option<usize>>,
    pub joint_rest_positions: Vec<Vector3<f64>>,
    /// Per-vertex `(joint, weight)` rows, sorted by joint.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
    pub shape_basis: Basis,
    pub expression_basis: Basis,
    /// Over the flattened `(R_k − I)` of every non-root joint.
    pub pose_basis: Basis,
    /// Optional `(joint, vertex, weight)` regressor from shaped vertices to
    /// joint positions; without it the rest positions are used as given.
    pub joint_regressor: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    /// Axis-angle rotation per joint, radians.
    pub rotations: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
    pub betas: Vec<f64>,
    pub expressions: Vec<f64>,
}

impl PoseParams {
    pub fn zero(joints: usize) -> Self {
        Self { rotations: vec![Vector3::zeros(); joints], root_translation: Vector3::zeros(), betas: Vec::new(), expressions: Vec::new() }
    }
}

impl SkinnedBody {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let (v, k) = (self.vertex_count(), self.joint_count());
        if k == 0 {
            return Err(BodyError::Invalid("body has no joints".into()));
        }
        if self.joint_rest_positions.len() != k {
            return Err(BodyError::Dimension { what: "joint rest positions", expected: k, got: self.joint_rest_positions.len() });
        }
        for (j, p) in self.parents.iter().enumerate() {
            match (j, p) {
                (0, None) => {}
                (0, Some(_)) => return Err(BodyError::Invalid("joint 0 must be the root".into())),
                (_, None) => return Err(BodyError::Invalid(format!("joint {j} has no parent"))),
                (_, Some(p)) if *p >= j => return Err(BodyError::Invalid(format!("joint {j} has parent {p}; parents must precede children"))),
                _ => {}
            }
        }
        if self.skin_weights.len() != v {
            return Err(BodyError::Dimension { what: "skin weight rows", expected: v, got: self.skin_weights.len() });
        }
        for (i, row) in self.skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= k || !(w >= 0.0) {
                    return Err(BodyError::Invalid(format!("vertex {i}: bad skin weight ({j}, {w})")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(BodyError::Invalid(format!("vertex {i}: skin weights sum to {sum}")));
            }
        }
        for f in &self.faces {
            if f.iter().any(|&i| i >= v) {
                return Err(BodyError::Invalid(format!("face {f:?} indexes past {v} vertices")));
            }
        }
        for (name, b, expected_n) in [
            ("shape basis", &self.shape_basis, None),
            ("expression basis", &self.expression_basis, None),
            ("pose basis", &self.pose_basis, Some(9 * (k - 1))),
        ] {
            if b.n == 0 {
                continue;
            }
            if b.data.len() != v * 3 * b.n {
                return Err(BodyError::Dimension { what: name, expected: v * 3 * b.n, got: b.data.len() });
            }
            if let Some(n) = expected_n {
                if b.n != n {
                    return Err(BodyError::Dimension { what: name, expected: n, got: b.n });
                }
            }
        }
        for &(j, vi, _) in &self.joint_regressor {
            if j >= k || vi >= v {
                return Err(BodyError::Invalid(format!("joint regressor entry ({j}, {vi}) out of range")));
            }
        }
        Ok(())
    }

    fn check_pose(&self, pose: &PoseParams) -> Result<(), BodyError> {
        if pose.rotations.len() != self.joint_count() {
            return Err(BodyError::Dimension { what: "pose joints", expected: self.joint_count(), got: pose.rotations.len() });
        }
        for (what, got, n) in [("betas", pose.betas.len(), self.shape_basis.n), ("expressions", pose.expressions.len(), self.expression_basis.n)] {
            if got != 0 && got != n {
                return Err(BodyError::Dimension { what, expected: n, got });
            }
        }
        let finite = pose.rotations.iter().all(|r| r.iter().all(|x| x.is_finite()))
            && pose.root_translation.iter().all(|x| x.is_finite())
            && pose.betas.iter().chain(&pose.expressions).all(|x| x.is_finite());
        if !finite {
            return Err(BodyError::Invalid("pose contains non-finite values".into()));
        }
        Ok(())
    }

    /// Template plus shape and expression offsets.
    pub fn shaped_vertices(&self, pose: &PoseParams) -> Vec<Vector3<f64>> {
        let mut v = self.template_vertices.clone();
        self.shape_basis.apply(&pose.betas, &mut v);
        self.expression_basis.apply(&pose.expressions, &mut v);
        v
    }

    /// Joint positions `J(β)`.
    pub fn joints(&self, shaped: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        if self.joint_regressor.is_empty() {
            return self.joint_rest_positions.clone();
        }
        let mut j = vec![Vector3::zeros(); self.joint_count()];
        for &(k, v, w) in &self.joint_regressor {
            j[k] += w * shaped[v];
        }
        j
    }

    /// Poses the body: joint transforms plus deformed vertices.
    pub fn pose(&self, pose: &PoseParams) -> Result<PosedBody, BodyError> {
        self.check_pose(pose)?;
        let mut shaped = self.shaped_vertices(pose);
        let joints = self.joints(&shaped);
        let rotations: Vec<Matrix3<f64>> = pose.rotations.iter().map(axis_angle_to_matrix).collect();
        let transforms = fk_transforms(&self.parents, &joints, &rotations, &pose.root_translation);
        if self.pose_basis.n > 0 {
            let mut feat = Vec::with_capacity(self.pose_basis.n);
            for r in &rotations[1..] {
                let d = r - Matrix3::identity();
                for a in 0..3 {
                    for b in 0..3 {
                        feat.push(d[(a, b)]);
                    }
                }
            }
            self.pose_basis.apply(&feat, &mut shaped);
        }
        let mut vertex_matrices = Vec::with_capacity(self.vertex_count());
        let mut vertices = Vec::with_capacity(self.vertex_count());
        for (row, v) in self.skin_weights.iter().zip(&shaped) {
            let m = blend(row, &transforms);
            vertices.push(transform_point(&m, v));
            vertex_matrices.push(m);
        }
        Ok(PosedBody { transforms, vertex_matrices, vertices, unposed: shaped })
    }
}

/// `Σ_k w_k G_k` with the last row forced to exactly `(0, 0, 0, 1)`.
fn blend(row: &[(usize, f64)], transforms: &[Matrix4<f64>]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for &(k, w) in row {
        m += w * transforms[k];
    }
    m[(3, 0)] = 0.0;
    m[(3, 1)] = 0.0;
    m[(3, 2)] = 0.0;
    m[(3, 3)] = 1.0;
    m
}

/// Rest-relative joint transforms with the root translation applied last.
pub fn fk_transforms(
    parents: &[Option<usize>],
    joints: &[Vector3<f64>],
    rotations: &[Matrix3<f64>],
    root_translation: &Vector3<f64>,
) -> Vec<Matrix4<f64>> {
    let mut world: Vec<Matrix4<f64>> = Vec::with_capacity(parents.len());
    for k in 0..parents.len() {
        let w = match parents[k] {
            None => homogeneous(&rotations[k], &joints[k]),
            Some(p) => world[p] * homogeneous(&rotations[k], &(joints[k] - joints[p])),
        };
        world.push(w);
    }
    world
        .iter()
        .zip(joints)
        .map(|(w, j)| {
            // w · [I | −j], then translate by the root offset
            let mut g = *w;
            let t = w.fixed_view::<3, 3>(0, 0) * j;
            for a in 0..3 {
                g[(a, 3)] -= t[a];
                g[(a, 3)] += root_translation[a];
            }
            g
        })
        .collect()
}

/// A body at one pose.
#[derive(Clone, Debug)]
pub struct PosedBody {
    /// Rest-relative joint transforms `G_k`.
    pub transforms: Vec<Matrix4<f64>>,
    /// Per-vertex blended matrices `Σ_k w_k G_k`.
    pub vertex_matrices: Vec<Matrix4<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    /// Vertices after shape, expression and pose blend shapes, before skinning.
    pub unposed: Vec<Vector3<f64>>,
}

impl PosedBody {
    pub fn vertex_matrix(&self, index: usize) -> Result<&Matrix4<f64>, BodyError> {
        self.vertex_matrices.get(index).ok_or(BodyError::VertexIndex { index, count: self.vertex_matrices.len() })
    }
}

pub fn forward_kinematics(body: &SkinnedBody, pose: &PoseParams) -> Result<Vec<Matrix4<f64>>, BodyError> {
    Ok(body.pose(pose)?.transforms)
}

pub fn lbs_deform(body: &SkinnedBody, pose: &PoseParams) -> Result<Vec<Vector3<f64>>, BodyError> {
    Ok(body.pose(pose)?.vertices)
}

pub fn vertex_lbs_matrix(body: &SkinnedBody, pose: &PoseParams, index: usize) -> Result<Matrix4<f64>, BodyError> {
    if index >= body.vertex_count() {
        return Err(BodyError::VertexIndex { index, count: body.vertex_count() });
    }
    Ok(*body.pose(pose)?.vertex_matrix(index)?)
}

#[cfg(test)]
mod tests;
