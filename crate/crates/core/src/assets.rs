//! Procedurally generated fixtures: a capsule arm body, gaussian clouds for
//! the arm, a cube and a sphere, and an arm-raise motion clip.
//!
//! The arm lies along x in [−0.5, 0.5] with radius 0.08 and four joints
//! (root, shoulder, elbow, wrist). Everything is mirror-symmetric under
//! z ↦ −z.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::body::{Basis, MotionFrame, MotionSequence, SkinnedBody};
use crate::gauss::GaussianCloud;
use crate::math::IDENTITY_QUAT;

pub const ARM_RADIUS: f64 = 0.08;
pub const ARM_HALF_LENGTH: f64 = 0.5;
/// x positions of root, shoulder, elbow and wrist.
pub const ARM_JOINTS_X: [f64; 4] = [-0.5, -0.45, 0.0, 0.3];
pub const JOINT_NAMES: [&str; 4] = ["root", "shoulder", "elbow", "wrist"];
/// Half-width of the smoothstep skinning blend around each joint.
pub const BLEND_HALF_WIDTH: f64 = 0.03;

const SEGMENTS: usize = 20;
const CYLINDER_RINGS: usize = 20;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Skinning weights along the arm as `(joint, weight)` pairs.
pub fn arm_weights(x: f64) -> Vec<(usize, f64)> {
    let mut w = [1.0, 0.0, 0.0, 0.0];
    for b in 1..4 {
        let s = smoothstep(ARM_JOINTS_X[b] - BLEND_HALF_WIDTH, ARM_JOINTS_X[b] + BLEND_HALF_WIDTH, x);
        // joint b takes over from everything before it
        for wa in w.iter_mut().take(b) {
            *wa *= 1.0 - s;
        }
        w[b] = s;
    }
    w.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(j, &v)| (j, v)).collect()
}

/// Closed, outward-oriented surface of revolution about the x axis from ring
/// profile `(x, radius)` pairs plus two poles.
fn revolve(profile: &[(f64, f64)], x_min: f64, x_max: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let mut v = vec![Vector3::new(x_min, 0.0, 0.0)];
    for &(x, r) in profile {
        for j in 0..SEGMENTS {
            let th = 2.0 * PI * j as f64 / SEGMENTS as f64;
            v.push(Vector3::new(x, r * th.cos(), r * th.sin()));
        }
    }
    v.push(Vector3::new(x_max, 0.0, 0.0));
    let last = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + i * SEGMENTS + j % SEGMENTS;
    let mut f = Vec::new();
    for j in 0..SEGMENTS {
        f.push([0, ring(0, j + 1), ring(0, j)]);
    }
    for i in 0..profile.len() - 1 {
        for j in 0..SEGMENTS {
            f.push([ring(i, j), ring(i, j + 1), ring(i + 1, j)]);
            f.push([ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)]);
        }
    }
    let n = profile.len() - 1;
    for j in 0..SEGMENTS {
        f.push([last, ring(n, j), ring(n, j + 1)]);
    }
    (v, f)
}

/// Capsule mesh (482 vertices) with its skinning.
pub fn arm_body() -> SkinnedBody {
    let r = ARM_RADIUS;
    let x0 = ARM_HALF_LENGTH - r;
    let mut profile = Vec::new();
    for phi in [30f64, 60.0] {
        let a = phi.to_radians();
        profile.push((-x0 - r * a.cos(), r * a.sin()));
    }
    for i in 0..CYLINDER_RINGS {
        profile.push((-x0 + 2.0 * x0 * i as f64 / (CYLINDER_RINGS - 1) as f64, r));
    }
    for phi in [60f64, 30.0] {
        let a = phi.to_radians();
        profile.push((x0 + r * a.cos(), r * a.sin()));
    }
    let (template_vertices, faces) = revolve(&profile, -ARM_HALF_LENGTH, ARM_HALF_LENGTH);
    let skin_weights = template_vertices.iter().map(|p| arm_weights(p.x)).collect();
    SkinnedBody {
        template_vertices,
        faces,
        parents: vec![None, Some(0), Some(1), Some(2)],
        joint_rest_positions: ARM_JOINTS_X.iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect(),
        skin_weights,
        shape_basis: Basis::default(),
        expression_basis: Basis::default(),
        pose_basis: Basis::default(),
        joint_regressor: Vec::new(),
    }
}

/// UV sphere mesh used as a convex test body.
pub fn sphere_mesh(radius: f64, rings: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let profile: Vec<(f64, f64)> = (1..rings)
        .map(|i| {
            let a = PI * i as f64 / rings as f64;
            (-radius * a.cos(), radius * a.sin())
        })
        .collect();
    revolve(&profile, -radius, radius)
}

pub const SKIN_COLOR: [f64; 3] = [0.9, 0.7, 0.6];

/// 600 gaussians just under the arm surface (30 along x, 20 around).
pub fn arm_cloud() -> GaussianCloud {
    let mut c = GaussianCloud::empty(0);
    let (nx, na) = (30, 20);
    let inner = 0.85 * ARM_RADIUS;
    for i in 0..nx {
        let x = -0.45 + 0.9 * i as f64 / (nx - 1) as f64;
        for j in 0..na {
            let th = 2.0 * PI * (j as f64 + 0.5) / na as f64;
            let p = Vector3::new(x, inner * th.cos(), inner * th.sin());
            c.push_colored(p, IDENTITY_QUAT, Vector3::new(0.022, 0.018, 0.018), 0.8, SKIN_COLOR);
        }
    }
    c
}

pub const CUBE_COLOR: [f64; 3] = [0.2, 0.4, 0.9];

/// Lattice-filled cube of the given edge, centered at the origin
/// (6 × 5 × 5 = 150 gaussians).
pub fn cube_cloud(edge: f64) -> GaussianCloud {
    let mut c = GaussianCloud::empty(0);
    let h = 0.5 * edge;
    let (nx, n) = (6, 5);
    for i in 0..nx {
        for j in 0..n {
            for k in 0..n {
                let p = Vector3::new(
                    -h + edge * i as f64 / (nx - 1) as f64,
                    -h + edge * j as f64 / (n - 1) as f64,
                    -h + edge * k as f64 / (n - 1) as f64,
                );
                c.push_colored(p, IDENTITY_QUAT, Vector3::repeat(0.2 * edge), 0.9, CUBE_COLOR);
            }
        }
    }
    c
}

/// Fibonacci-sphere cloud of `n` gaussians on radius `r`.
pub fn sphere_cloud(radius: f64, n: usize) -> GaussianCloud {
    let mut c = GaussianCloud::empty(0);
    let golden = PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let p = Vector3::new(r * th.cos(), y, r * th.sin()) * radius;
        c.push_colored(p, IDENTITY_QUAT, Vector3::repeat(0.3 * radius), 0.9, [0.8, 0.3, 0.2]);
    }
    c
}

/// Peak joint angles (radians, about +z) of the arm-raise clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmRaise {
    pub frames: usize,
    /// Frames spent ramping; the rest hold the final pose.
    pub ramp_frames: usize,
    pub shoulder: f64,
    pub elbow: f64,
    pub wrist: f64,
}

impl Default for ArmRaise {
    fn default() -> Self {
        Self { frames: 60, ramp_frames: 40, shoulder: 60f64.to_radians(), elbow: 30f64.to_radians(), wrist: -70f64.to_radians() }
    }
}

impl ArmRaise {
    pub fn sequence(&self) -> MotionSequence {
        let frames = (0..self.frames)
            .map(|f| {
                let s = smoothstep(0.0, 1.0, f as f64 / self.ramp_frames.max(1) as f64);
                MotionFrame {
                    pose: vec![[0.0; 3], [0.0, 0.0, s * self.shoulder], [0.0, 0.0, s * self.elbow], [0.0, 0.0, s * self.wrist]],
                    root_translation: [0.0; 3],
                }
            })
            .collect();
        MotionSequence { fps: 30.0, frames }
    }
}

pub fn arm_raise_motion() -> MotionSequence {
    ArmRaise::default().sequence()
}

/// Cube edge and canonical center of the hand-held object: under the hand,
/// its top face 2 cm below the skin so the rest pose is penetration-free with
/// margin.
pub const HELD_CUBE_EDGE: f64 = 0.12;
pub const HELD_CUBE_CENTER: [f64; 3] = [0.38, -0.16, 0.0];

/// The held cube in canonical (composed) space.
pub fn held_cube() -> GaussianCloud {
    let mut c = cube_cloud(HELD_CUBE_EDGE);
    let t = Vector3::from(HELD_CUBE_CENTER);
    for m in &mut c.means {
        *m += t;
    }
    c
}
