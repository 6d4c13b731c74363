use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Basis, BodyError, SkinnedBody};

/// Basis with a declared `[V, 3, n]` shape, data flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisData {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

/// On-disk skinned body (JSON). Skin weights and the joint regressor are
/// sparse triplets: `(vertex, joint, weight)` and `(joint, vertex, weight)`.
/// The root's parent is `-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyAsset {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub joint_parents: Vec<i64>,
    pub joint_rest_positions: Vec<[f64; 3]>,
    pub skin_weights: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joint_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_basis: Option<BasisData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_basis: Option<BasisData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_basis: Option<BasisData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_regressor: Option<Vec<(usize, usize, f64)>>,
}

fn basis_from(b: Option<&BasisData>, vertices: usize, what: &'static str) -> Result<Basis, BodyError> {
    let Some(b) = b else { return Ok(Basis::default()) };
    if b.shape[0] != vertices || b.shape[1] != 3 {
        return Err(BodyError::Invalid(format!("{what} shape {:?} does not match {vertices} vertices", b.shape)));
    }
    if b.data.len() != b.shape.iter().product::<usize>() {
        return Err(BodyError::Dimension { what, expected: b.shape.iter().product(), got: b.data.len() });
    }
    Ok(Basis { n: b.shape[2], data: b.data.clone() })
}

fn basis_to(b: &Basis, vertices: usize) -> Option<BasisData> {
    (b.n > 0).then(|| BasisData { shape: [vertices, 3, b.n], data: b.data.clone() })
}

impl SkinnedBody {
    pub fn from_asset(a: &BodyAsset) -> Result<Self, BodyError> {
        let v = a.template_vertices.len();
        let mut parents = Vec::with_capacity(a.joint_parents.len());
        for &p in &a.joint_parents {
            parents.push(if p < 0 { None } else { Some(p as usize) });
        }
        let mut skin_weights = vec![Vec::new(); v];
        for &(vi, j, w) in &a.skin_weights {
            if vi >= v {
                return Err(BodyError::VertexIndex { index: vi, count: v });
            }
            skin_weights[vi].push((j, w));
        }
        for row in &mut skin_weights {
            row.sort_by_key(|&(j, _)| j);
        }
        let body = SkinnedBody {
            template_vertices: a.template_vertices.iter().map(|p| Vector3::from(*p)).collect(),
            faces: a.faces.clone(),
            parents,
            joint_rest_positions: a.joint_rest_positions.iter().map(|p| Vector3::from(*p)).collect(),
            skin_weights,
            shape_basis: basis_from(a.shape_basis.as_ref(), v, "shape basis")?,
            expression_basis: basis_from(a.expression_basis.as_ref(), v, "expression basis")?,
            pose_basis: basis_from(a.pose_basis.as_ref(), v, "pose basis")?,
            joint_regressor: a.joint_regressor.clone().unwrap_or_default(),
        };
        body.validate()?;
        Ok(body)
    }

    pub fn to_asset(&self) -> BodyAsset {
        let v = self.vertex_count();
        BodyAsset {
            template_vertices: self.template_vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
            faces: self.faces.clone(),
            joint_parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            joint_rest_positions: self.joint_rest_positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            skin_weights: self.skin_weights.iter().enumerate().flat_map(|(vi, row)| row.iter().map(move |&(j, w)| (vi, j, w))).collect(),
            joint_names: Vec::new(),
            shape_basis: basis_to(&self.shape_basis, v),
            expression_basis: basis_to(&self.expression_basis, v),
            pose_basis: basis_to(&self.pose_basis, v),
            joint_regressor: (!self.joint_regressor.is_empty()).then(|| self.joint_regressor.clone()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BodyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_asset(&serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BodyError> {
        std::fs::write(path, serde_json::to_string(&self.to_asset())?)?;
        Ok(())
    }
}
