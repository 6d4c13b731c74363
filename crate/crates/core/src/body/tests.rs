use super::*;
use crate::math::axis_angle_to_matrix;
use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rvec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

/// Random chain-with-branches body; parents precede children.
fn random_body(rng: &mut ChaCha8Rng, joints: usize, verts: usize) -> SkinnedBody {
    let mut parents = vec![None];
    let mut rest = vec![rvec(rng, 0.2)];
    for k in 1..joints {
        let p = rng.random_range(0..k);
        parents.push(Some(p));
        rest.push(rest[p] + rvec(rng, 0.5));
    }
    let mut skin_weights = Vec::new();
    let mut template = Vec::new();
    for _ in 0..verts {
        template.push(rvec(rng, 1.0));
        let a = rng.random_range(0..joints);
        let b = (a + 1) % joints;
        let w = rng.random_range(0.0..1.0);
        let mut row = if a == b { vec![(a, 1.0)] } else { vec![(a, w), (b, 1.0 - w)] };
        row.sort_by_key(|e| e.0);
        skin_weights.push(row);
    }
    SkinnedBody {
        template_vertices: template,
        faces: vec![],
        parents,
        joint_rest_positions: rest,
        skin_weights,
        shape_basis: Basis::default(),
        expression_basis: Basis::default(),
        pose_basis: Basis::default(),
        joint_regressor: vec![],
    }
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> PoseParams {
    PoseParams { rotations: (0..joints).map(|_| rvec(rng, 1.2)).collect(), root_translation: rvec(rng, 0.5), betas: vec![], expressions: vec![] }
}

/// Moves a point rigidly attached to joint `k` by walking the chain one
/// rotation at a time (no matrices, no rest-relative factoring).
fn chain_oracle(body: &SkinnedBody, pose: &PoseParams, k: usize, p: Vector3<f64>) -> Vector3<f64> {
    let j = &body.joint_rest_positions;
    let mut x = p - j[k];
    let mut cur = k;
    loop {
        x = axis_angle_to_matrix(&pose.rotations[cur]) * x;
        match body.parents[cur] {
            Some(par) => {
                x += j[cur] - j[par];
                cur = par;
            }
            None => {
                x += j[cur];
                break;
            }
        }
    }
    x + pose.root_translation
}

#[test]
fn zero_pose_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let body = random_body(&mut rng, 5, 50);
    let posed = body.pose(&PoseParams::zero(5)).unwrap();
    for g in &posed.transforms {
        assert!((g - Matrix4::identity()).abs().max() < 1e-15);
    }
    for (a, b) in posed.vertices.iter().zip(&body.template_vertices) {
        assert_eq!(a, b);
    }
}

#[test]
fn single_rotation_fk() {
    let body = SkinnedBody {
        template_vertices: vec![Vector3::new(1.0, 0.0, 0.0)],
        faces: vec![],
        parents: vec![None, Some(0)],
        joint_rest_positions: vec![Vector3::zeros(), Vector3::zeros()],
        skin_weights: vec![vec![(1, 1.0)]],
        shape_basis: Basis::default(),
        expression_basis: Basis::default(),
        pose_basis: Basis::default(),
        joint_regressor: vec![],
    };
    let mut pose = PoseParams::zero(2);
    pose.rotations[1] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
    let g = &forward_kinematics(&body, &pose).unwrap()[1];
    let p = g * nalgebra::Vector4::new(1.0, 0.0, 0.0, 1.0);
    assert!((p - nalgebra::Vector4::new(0.0, 1.0, 0.0, 1.0)).norm() < 1e-15);
    let v = lbs_deform(&body, &pose).unwrap();
    assert!((v[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
}

#[test]
fn fk_matches_chain_oracle_and_is_rigid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let body = random_body(&mut rng, 5, 10);
        let pose = random_pose(&mut rng, 5);
        let g = forward_kinematics(&body, &pose).unwrap();
        for k in 0..5 {
            let p = rvec(&mut rng, 1.0);
            let expected = chain_oracle(&body, &pose, k, p);
            assert!((crate::math::transform_point(&g[k], &p) - expected).norm() < 1e-10);
            let r = crate::math::linear_part(&g[k]);
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-8);
            assert!((r.determinant() - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn lbs_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let body = random_body(&mut rng, 6, 200);
    let pose = random_pose(&mut rng, 6);
    let posed = body.pose(&pose).unwrap();
    for (v, row) in body.skin_weights.iter().enumerate() {
        let x = body.template_vertices[v];
        let expected: Vector3<f64> = row.iter().map(|&(k, w)| w * chain_oracle(&body, &pose, k, x)).sum();
        assert!((posed.vertices[v] - expected).norm() < 1e-8);
        let m = vertex_lbs_matrix(&body, &pose, v).unwrap();
        assert_eq!(m.row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!((crate::math::transform_point(&m, &x) - posed.vertices[v]).norm() < 1e-10);
    }
    assert!(matches!(vertex_lbs_matrix(&body, &pose, 200), Err(BodyError::VertexIndex { .. })));
}

#[test]
fn vertex_matrix_is_weighted_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut body = random_body(&mut rng, 3, 4);
    body.skin_weights[0] = vec![(0, 0.5), (2, 0.5)];
    let pose = random_pose(&mut rng, 3);
    let posed = body.pose(&pose).unwrap();
    let expected = 0.5 * posed.transforms[0] + 0.5 * posed.transforms[2];
    assert!((posed.vertex_matrices[0] - expected).abs().max() < 1e-15);
}

#[test]
fn blend_shapes_and_regressor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut body = random_body(&mut rng, 3, 4);
    let v = 4;
    body.shape_basis = Basis { n: 1, data: vec![1.0; v * 3] };
    // pose basis responds to the (0,1) entry of R_1 − I on vertex 0, x only
    let mut pose_data = vec![0.0; v * 3 * 18];
    pose_data[1] = 1.0;
    body.pose_basis = Basis { n: 18, data: pose_data };
    body.validate().unwrap();
    let mut pose = PoseParams::zero(3);
    pose.betas = vec![0.25];
    let shaped = body.pose(&pose).unwrap().vertices;
    assert!((shaped[2] - (body.template_vertices[2] + Vector3::repeat(0.25))).norm() < 1e-15);

    pose.betas.clear();
    pose.rotations[1] = Vector3::new(0.0, 0.0, 0.3);
    let unposed = body.pose(&pose).unwrap().unposed;
    let r = axis_angle_to_matrix(&pose.rotations[1]);
    assert!((unposed[0].x - body.template_vertices[0].x - r[(0, 1)]).abs() < 1e-15);

    body.joint_regressor = vec![(0, 1, 1.0), (1, 2, 0.5), (1, 3, 0.5), (2, 0, 1.0)];
    let j = body.joints(&body.template_vertices);
    assert_eq!(j[0], body.template_vertices[1]);
    assert!((j[1] - 0.5 * (body.template_vertices[2] + body.template_vertices[3])).norm() < 1e-15);
}

#[test]
fn validation_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let body = random_body(&mut rng, 3, 5);
    let mut b = body.clone();
    b.skin_weights[0] = vec![(0, 0.7)];
    assert!(b.validate().is_err());
    let mut b = body.clone();
    b.parents[1] = Some(2);
    assert!(b.validate().is_err());
    let mut b = body.clone();
    b.faces = vec![[0, 1, 9]];
    assert!(b.validate().is_err());
    assert!(matches!(body.pose(&PoseParams::zero(2)), Err(BodyError::Dimension { .. })));
}

#[test]
fn asset_and_motion_round_trip_byte_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut body = random_body(&mut rng, 4, 30);
    body.faces = vec![[0, 1, 2], [2, 3, 4]];
    body.shape_basis = Basis { n: 2, data: (0..30 * 6).map(|_| rng.random_range(-0.1..0.1)).collect() };
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    body.save(&a).unwrap();
    let loaded = SkinnedBody::load(&a).unwrap();
    assert_eq!(loaded, body);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let motion = MotionSequence {
        fps: 30.0,
        frames: (0..5)
            .map(|_| MotionFrame { pose: (0..4).map(|_| rvec(&mut rng, 1.0).into()).collect(), root_translation: rvec(&mut rng, 1.0).into() })
            .collect(),
    };
    motion.validate_for(&body).unwrap();
    motion.save(&a).unwrap();
    let m2 = MotionSequence::load(&a).unwrap();
    assert_eq!(m2, motion);
    m2.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn knn_exact_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let verts: Vec<_> = (0..500).map(|_| rvec(&mut rng, 1.0)).collect();
    let queries: Vec<_> = (0..1000).map(|_| rvec(&mut rng, 1.2)).collect();
    for k in [1, 3, 8] {
        let a = nearest_vertices(&queries, &verts, k).unwrap();
        let b = brute_force_knn(&queries, &verts, k).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.distances, b.distances);
    }
    // lattice points produce many exact ties
    let lattice: Vec<_> = (0..343).map(|i| Vector3::new((i % 7) as f64, ((i / 7) % 7) as f64, (i / 49) as f64)).collect();
    let lq: Vec<_> = (0..300).map(|i| Vector3::new((i % 13) as f64 * 0.5, ((i / 13) % 13) as f64 * 0.5, (i % 5) as f64 * 1.5)).collect();
    let a = nearest_vertices(&lq, &lattice, 6).unwrap();
    let b = brute_force_knn(&lq, &lattice, 6).unwrap();
    assert_eq!(a.indices, b.indices);
}

#[test]
fn knn_trivial_cases() {
    let verts = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.0)];
    let n = nearest_vertices(&[Vector3::zeros()], &verts, 3).unwrap();
    assert_eq!(n.indices_of(0), &[2, 0, 1]);
    assert_eq!(n.distances_of(0), &[0.0, 1.0, 1.0]);
    assert!(matches!(nearest_vertices(&[Vector3::zeros()], &[], 1), Err(BodyError::EmptyVertices)));
    assert!(matches!(nearest_vertices(&[Vector3::zeros()], &verts, 4), Err(BodyError::TooManyNeighbors { .. })));
}
