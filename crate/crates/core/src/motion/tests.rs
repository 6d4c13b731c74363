use super::*;
use crate::assets::{arm_body, held_cube, sphere_mesh};
use crate::body::{PoseParams, SkinnedBody};
use crate::hexplane::HexPlaneConfig;
use crate::math::quat_from_axis_angle;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

fn arm_pose(shoulder: f64, elbow: f64, wrist: f64) -> PoseParams {
    let mut p = PoseParams::zero(4);
    p.rotations[1] = Vector3::new(0.0, 0.0, shoulder);
    p.rotations[2] = Vector3::new(0.0, 0.0, elbow);
    p.rotations[3] = Vector3::new(0.0, 0.0, wrist);
    p
}

fn cube_setup(body: &SkinnedBody) -> (Vec<Vector3<f64>>, Binding) {
    let pts = held_cube().means;
    let b = Binding::new(&pts, &body.template_vertices).unwrap();
    (pts, b)
}

/// Held cube moved so its center sits at `x` along the arm.
fn cube_at(body: &SkinnedBody, x: f64) -> (Vec<Vector3<f64>>, Binding) {
    let dx = Vector3::new(x - crate::assets::HELD_CUBE_CENTER[0], 0.0, 0.0);
    let pts: Vec<_> = held_cube().means.iter().map(|p| p + dx).collect();
    let b = Binding::new(&pts, &body.template_vertices).unwrap();
    (pts, b)
}

#[test]
fn rest_pose_is_identity_everywhere() {
    let body = arm_body();
    let posed = body.pose(&PoseParams::zero(4)).unwrap();
    let (pts, b) = cube_setup(&body);
    assert_eq!(human_deform(&pts, &b, &posed, None, 0.0).unwrap(), pts);
    let base = object_base_transform(&b, &posed).unwrap();
    assert!((base - Matrix4::identity()).abs().max() < 1e-15);
    let index = PosedIndex::new(posed);
    let l = correspondence_loss(&b, &index, &pts, &CorrespondenceConfig::default()).unwrap();
    // at rest every G is the identity, so the soft mixture equals G_c
    assert!(l.value < 1e-28);
    assert!(l.d_points.iter().all(|g| g.norm() < 1e-12));
    assert_eq!(correspondence_loss_hard(&b, &index, &pts).unwrap(), 0.0);
}

#[test]
fn human_points_follow_their_vertex_matrix() {
    let body = arm_body();
    let posed = body.pose(&arm_pose(0.4, -0.6, 0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<_> = (0..40).map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
    let b = Binding::new(&pts, &body.template_vertices).unwrap();
    let out = human_deform(&pts, &b, &posed, None, 0.3).unwrap();
    let cfg = HexPlaneConfig { resolution: 4, feature_len: 6, hidden: vec![4], ..Default::default() };
    let mut field = HexPlaneField::new(cfg, 3).unwrap();
    // zero-initialized head gives zero offsets
    assert_eq!(human_deform(&pts, &b, &posed, Some(&field), 0.3).unwrap(), out);
    for (i, p) in pts.iter().enumerate() {
        let v = b.vertices[i];
        let nearest = body.template_vertices.iter().map(|w| (w - p).norm()).fold(f64::INFINITY, f64::min);
        assert_eq!((body.template_vertices[v] - p).norm(), nearest);
        let g = vertex_lbs_matrix(&body, &arm_pose(0.4, -0.6, 0.3), v);
        assert!((math::transform_point(&g, p) - out[i]).norm() < 1e-12);
    }
    let n = field.params.len();
    for (k, x) in field.params[n - 3..].iter_mut().enumerate() {
        *x = 0.01 * (k + 1) as f64;
    }
    let with = human_deform(&pts, &b, &posed, Some(&field), 0.3).unwrap();
    let offs = field.offsets(&pts, 0.3);
    for i in 0..pts.len() {
        assert!((with[i] - out[i] - offs[i]).norm() < 1e-15);
    }
    for r in human_rotations(&b, &posed).unwrap() {
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-10);
    }
    assert!(matches!(human_deform(&pts[..3], &b, &posed, None, 0.0), Err(MotionError::Unbound { .. })));
}

fn vertex_lbs_matrix(body: &SkinnedBody, pose: &PoseParams, v: usize) -> Matrix4<f64> {
    crate::body::vertex_lbs_matrix(body, pose, v).unwrap()
}

#[test]
fn base_transform_is_entrywise_mean() {
    let body = arm_body();
    let pose = arm_pose(0.5, 0.7, -0.9);
    let posed = body.pose(&pose).unwrap();
    // centered on the wrist so the bindings straddle two bones
    let (_, b) = cube_at(&body, 0.3);
    let mut expected = Matrix4::zeros();
    for &v in &b.vertices {
        expected += vertex_lbs_matrix(&body, &pose, v);
    }
    expected /= b.len() as f64;
    let base = object_base_transform(&b, &posed).unwrap();
    assert!((base - expected).abs().max() < 1e-14);
    assert_eq!(base.row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
    // two rigid bones averaged: the linear part is no longer a rotation
    assert!(math::rigidity_deviation(&math::linear_part(&base)) > 1e-3);
    assert!(matches!(object_base_transform(&Binding { vertices: vec![] }, &posed), Err(MotionError::EmptyBinding)));
}

#[test]
fn averaging_two_quarter_turns() {
    // mean of identity and a 90° z turn: [[.5,-.5],[.5,.5]] block, not a rotation
    let a = Matrix4::identity();
    let b = math::homogeneous(&math::quat_to_matrix(&quat_from_axis_angle(&Vector3::z(), FRAC_PI_2)), &Vector3::zeros());
    let m = 0.5 * (a + b);
    let p = math::transform_point(&m, &Vector3::new(1.0, 0.0, 0.0));
    assert!((p - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
}

#[test]
fn residual_applies_rotation_then_translation() {
    let r = ResidualTransform::new(quat_from_axis_angle(&Vector3::z(), FRAC_PI_2), Vector3::new(0.0, 0.0, 1.0));
    let p = r.apply_point(&Vector3::new(1.0, 0.0, 0.0));
    assert!((p - Vector3::new(0.0, 1.0, 1.0)).norm() < 1e-15);
    let id = ResidualTransform::identity();
    let q = Vector3::new(0.3, -0.2, 0.7);
    assert_eq!(id.apply_point(&q), q);
    assert_eq!(id.as_matrix(), Matrix4::identity());
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<ResidualTransform>(&json).unwrap(), r);
}

#[test]
fn residual_jacobian_and_pullback_match_finite_differences() {
    let r = ResidualTransform::new([0.9, 0.2, -0.3, 0.25], Vector3::new(0.1, -0.2, 0.3));
    let p = Vector3::new(0.4, -0.7, 0.2);
    let j = r.jacobian(&p);
    let eps = 1e-6;
    for k in 0..4 {
        let mut a = r;
        a.rotation[k] += eps;
        let mut b = r;
        b.rotation[k] -= eps;
        let fd = (a.apply_point(&p) - b.apply_point(&p)) / (2.0 * eps);
        assert!((fd - j.column(k)).norm() < 1e-8, "k={k}");
    }
    // pullback of a linear functional ⟨c, R p + T⟩ summed over points
    let pts = vec![p, Vector3::new(-0.1, 0.5, 0.9), Vector3::new(0.2, 0.2, -0.6)];
    let cs = vec![Vector3::new(1.0, 0.5, -0.2), Vector3::new(-0.3, 0.7, 0.1), Vector3::new(0.2, -0.4, 0.9)];
    let f = |t: &ResidualTransform| t.apply(&pts).iter().zip(&cs).map(|(x, c)| x.dot(c)).sum::<f64>();
    let g = r.pullback(&pts, &cs, None);
    for k in 0..4 {
        let mut a = r;
        a.rotation[k] += eps;
        let mut b = r;
        b.rotation[k] -= eps;
        assert!(((f(&a) - f(&b)) / (2.0 * eps) - g.rotation[k]).abs() < 1e-8);
    }
    let sum: Vector3<f64> = cs.iter().sum();
    assert!((g.translation - sum).norm() < 1e-15);
}

/// Direct evaluation of the soft loss over all vertices (no tree, no shift).
fn soft_loss_oracle(b: &Binding, posed: &crate::body::PosedBody, pts: &[Vector3<f64>], cfg: &CorrespondenceConfig) -> f64 {
    let mut total = 0.0;
    for (x, &bound) in pts.iter().zip(&b.vertices) {
        let mut order: Vec<usize> = (0..posed.vertices.len()).collect();
        order.sort_by(|&i, &j| (posed.vertices[i] - x).norm_squared().total_cmp(&(posed.vertices[j] - x).norm_squared()).then(i.cmp(&j)));
        let nn = &order[..cfg.k];
        let e: Vec<f64> = nn.iter().map(|&j| (-(posed.vertices[j] - x).norm_squared() / cfg.tau).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut g_o = Matrix4::zeros();
        for (&j, ej) in nn.iter().zip(&e) {
            g_o += ej / z * posed.vertex_matrices[j];
        }
        let d = (posed.vertex_matrices[bound] - g_o).fixed_view::<3, 4>(0, 0).into_owned();
        total += d.norm_squared();
    }
    total / pts.len() as f64
}

#[test]
fn soft_loss_matches_oracle_and_gradients() {
    let body = arm_body();
    let pose = arm_pose(0.6, 0.4, -0.8);
    let posed = body.pose(&pose).unwrap();
    let (canonical, b) = cube_setup(&body);
    let index = PosedIndex::new(posed.clone());
    let cfg = CorrespondenceConfig::default();
    let base = object_base_transform(&b, &posed).unwrap();
    let (pts, _) = object_points(&canonical, &base, &ResidualTransform::identity());
    let l = correspondence_loss(&b, &index, &pts, &cfg).unwrap();
    let oracle = soft_loss_oracle(&b, &posed, &pts, &cfg);
    assert!((l.value - oracle).abs() <= 1e-12 * oracle.max(1e-12), "{} vs {}", l.value, oracle);
    assert!(l.value > 0.0);

    // point gradients, central differences; jitter off the z = 0 mirror plane
    // where the k-nearest set has exact ties and the loss has a kink
    let eps = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<_> = pts.iter().map(|p| p + Vector3::new(0.0, 0.0, rng.random_range(0.001..0.002))).collect();
    let l = correspondence_loss(&b, &index, &pts, &cfg).unwrap();
    for _ in 0..10 {
        let i = rng.random_range(0..pts.len());
        for c in 0..3 {
            let mut a = pts.clone();
            a[i][c] += eps;
            let mut m = pts.clone();
            m[i][c] -= eps;
            let fd = (correspondence_loss(&b, &index, &a, &cfg).unwrap().value - correspondence_loss(&b, &index, &m, &cfg).unwrap().value) / (2.0 * eps);
            let an = l.d_points[i][c];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "i={i} c={c} fd={fd} an={an}");
        }
    }

    // residual gradient
    let res = ResidualTransform::new([0.98, 0.05, -0.1, 0.12], Vector3::new(0.01, -0.02, 0.015));
    let (v, g) = correspondence_residual_grad(&b, &index, &canonical, &res, &cfg).unwrap();
    let val = |r: &ResidualTransform| correspondence_residual_grad(&b, &index, &canonical, r, &cfg).unwrap().0;
    assert_eq!(val(&res), v);
    for k in 0..4 {
        let mut a = res;
        a.rotation[k] += eps;
        let mut m = res;
        m.rotation[k] -= eps;
        let fd = (val(&a) - val(&m)) / (2.0 * eps);
        assert!((fd - g.rotation[k]).abs() <= 1e-5 * g.rotation[k].abs().max(1e-3), "q{k}: fd={fd} an={}", g.rotation[k]);
    }
    for c in 0..3 {
        let mut a = res;
        a.translation[c] += eps;
        let mut m = res;
        m.translation[c] -= eps;
        let fd = (val(&a) - val(&m)) / (2.0 * eps);
        assert!((fd - g.translation[c]).abs() <= 1e-5 * g.translation[c].abs().max(1e-3), "t{c}");
    }
}

#[test]
fn soft_loss_approaches_hard_as_tau_shrinks() {
    let body = arm_body();
    let posed = body.pose(&arm_pose(0.3, 0.9, -0.7)).unwrap();
    let (canonical, b) = cube_setup(&body);
    let index = PosedIndex::new(posed.clone());
    let base = object_base_transform(&b, &posed).unwrap();
    let (pts, _) = object_points(&canonical, &base, &ResidualTransform::identity());
    let hard = correspondence_loss_hard(&b, &index, &pts).unwrap();
    let soft = correspondence_loss(&b, &index, &pts, &CorrespondenceConfig { k: 8, tau: 1e-9 }).unwrap().value;
    assert!((soft - hard).abs() < 1e-6 * hard.max(1.0), "{soft} vs {hard}");
    // k = 1 is exactly the hard form
    let k1 = correspondence_loss(&b, &index, &pts, &CorrespondenceConfig { k: 1, tau: 0.01 }).unwrap().value;
    assert!((k1 - hard).abs() <= 1e-14 * hard);
}

#[test]
fn constant_field_gives_zero_loss() {
    // every vertex bound to one joint: all matrices equal, loss vanishes for any point
    let mut body = arm_body();
    for w in &mut body.skin_weights {
        *w = vec![(2, 1.0)];
    }
    let posed = body.pose(&arm_pose(0.8, -0.5, 0.4)).unwrap();
    let index = PosedIndex::new(posed);
    let pts = vec![Vector3::new(0.3, 0.4, -0.2), Vector3::new(-0.2, 0.0, 0.05)];
    let b = Binding { vertices: vec![7, 300] };
    let l = correspondence_loss(&b, &index, &pts, &CorrespondenceConfig::default()).unwrap();
    assert!(l.value < 1e-28);
}

#[test]
fn loss_config_errors() {
    let body = arm_body();
    let index = PosedIndex::new(body.pose(&PoseParams::zero(4)).unwrap());
    let b = Binding { vertices: vec![0] };
    let p = [Vector3::zeros()];
    assert!(matches!(correspondence_loss(&b, &index, &p, &CorrespondenceConfig { k: 8, tau: 0.0 }), Err(MotionError::Temperature(_))));
    assert!(matches!(correspondence_loss(&b, &index, &p, &CorrespondenceConfig { k: 0, tau: 0.01 }), Err(MotionError::NeighborCount)));
    assert!(matches!(correspondence_loss(&b, &index, &[], &CorrespondenceConfig::default()), Err(MotionError::Unbound { .. })));
}

/// Inside test by ray parity along a fixed generic direction.
fn ray_parity_inside(p: &Vector3<f64>, v: &[Vector3<f64>], f: &[[usize; 3]]) -> bool {
    let d = Vector3::new(0.5773, 0.5801, 0.5747).normalize();
    let mut hits = 0;
    for t in f {
        let (a, b, c) = (v[t[0]], v[t[1]], v[t[2]]);
        let (e1, e2) = (b - a, c - a);
        let h = d.cross(&e2);
        let det = e1.dot(&h);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = p - a;
        let u = s.dot(&h) / det;
        let q = s.cross(&e1);
        let w = d.dot(&q) / det;
        if u < 0.0 || w < 0.0 || u + w > 1.0 {
            continue;
        }
        if e2.dot(&q) / det > 0.0 {
            hits += 1;
        }
    }
    hits % 2 == 1
}

#[test]
fn winding_number_matches_ray_parity() {
    let (v, f) = sphere_mesh(0.5, 12);
    assert!((winding_number(&Vector3::zeros(), &v, &f) - 1.0).abs() < 1e-10);
    assert!(winding_number(&Vector3::new(3.0, 1.0, 2.0), &v, &f).abs() < 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<_> = (0..300).map(|_| Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7))).collect();
    let mut inside = 0;
    for p in &pts {
        let w = winding_number(p, &v, &f);
        assert!(w.abs() < 1e-8 || (w - 1.0).abs() < 1e-8, "w={w}");
        assert_eq!(w > 0.5, ray_parity_inside(p, &v, &f));
        inside += (w > 0.5) as usize;
    }
    assert!((penetration_fraction(&pts, &v, &f) - inside as f64 / 300.0).abs() < 1e-15);
    assert_eq!(penetration_fraction(&[], &v, &f), 0.0);
}

#[test]
fn degenerate_faces_are_ignored() {
    let (mut v, mut f) = sphere_mesh(0.5, 8);
    v.push(Vector3::new(0.1, 0.1, 0.1));
    let n = v.len() - 1;
    f.push([n, n, 0]);
    assert!((winding_number(&Vector3::zeros(), &v, &f) - 1.0).abs() < 1e-10);
    assert_eq!(penetration_fraction(&[Vector3::zeros()], &v, &f), 1.0);
}

#[test]
fn moving_with_the_hand_lowers_the_loss() {
    let body = arm_body();
    let pose = arm_pose(60f64.to_radians(), 30f64.to_radians(), -50f64.to_radians());
    let posed = body.pose(&pose).unwrap();
    // cube past the wrist blend, bound to hand vertices
    let (canonical, b) = cube_at(&body, 0.42);
    let index = PosedIndex::new(posed.clone());
    let cfg = CorrespondenceConfig::default();
    let base = object_base_transform(&b, &posed).unwrap();
    let (averaged, _) = object_points(&canonical, &base, &ResidualTransform::identity());
    let hand = posed.transforms[3];
    let rigid: Vec<_> = canonical.iter().map(|p| math::transform_point(&hand, p)).collect();
    let la = correspondence_loss(&b, &index, &averaged, &cfg).unwrap().value;
    let lr = correspondence_loss(&b, &index, &rigid, &cfg).unwrap().value;
    assert!((la - soft_loss_oracle(&b, &posed, &averaged, &cfg)).abs() <= 1e-12 * la);
    assert!((lr - soft_loss_oracle(&b, &posed, &rigid, &cfg)).abs() <= 1e-12 * lr.max(1e-300));
    assert!(lr < la, "rigid {lr} vs averaged {la}");
}
