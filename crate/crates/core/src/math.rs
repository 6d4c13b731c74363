//! Small geometric helpers shared across modules.
//!
//! Quaternions are stored as `[w, x, y, z]` everywhere (the order used by the
//! 3DGS `rot_0..rot_3` PLY properties). Matrices are column-vector style:
//! a point transforms as `x' = R x + t`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Returns `q / |q|`. A zero quaternion maps to identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Matrix `M` with `a ⊗ b = M b`.
pub fn quat_left_matrix(a: &Quat) -> nalgebra::Matrix4<f64> {
    let [w, x, y, z] = *a;
    nalgebra::Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Matrix `M` with `a ⊗ b = M a`.
pub fn quat_right_matrix(b: &Quat) -> nalgebra::Matrix4<f64> {
    let [w, x, y, z] = *b;
    nalgebra::Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Rotation matrix of a quaternion assumed to be unit-norm.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_matrix`] with respect to `w, x, y, z`
/// (the polynomial form, without normalization).
pub fn quat_to_matrix_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Gradient with respect to the unit quaternion pulled back to the raw
/// (unnormalized) parameter `raw`, through `q = raw / |raw|`.
pub fn normalize_pullback(raw: &Quat, grad_unit: &Quat) -> Quat {
    let n = quat_norm(raw);
    let q = quat_normalize(raw);
    let dot = q[0] * grad_unit[0] + q[1] * grad_unit[1] + q[2] * grad_unit[2] + q[3] * grad_unit[3];
    [
        (grad_unit[0] - q[0] * dot) / n,
        (grad_unit[1] - q[1] * dot) / n,
        (grad_unit[2] - q[2] * dot) / n,
        (grad_unit[3] - q[3] * dot) / n,
    ]
}

/// Gradient of `L(R(q))` with respect to the four quaternion components, given
/// `dL/dR` (treating `q` as the unit quaternion fed to [`quat_to_matrix`]).
pub fn matrix_grad_to_quat(q: &Quat, d_rot: &Matrix3<f64>) -> Quat {
    let parts = quat_to_matrix_partials(q);
    [
        parts[0].component_mul(d_rot).sum(),
        parts[1].component_mul(d_rot).sum(),
        parts[2].component_mul(d_rot).sum(),
        parts[3].component_mul(d_rot).sum(),
    ]
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let n = axis.norm();
    if n == 0.0 {
        return IDENTITY_QUAT;
    }
    let a = axis / n;
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Unit quaternion of a proper rotation matrix (Shepperd's method).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Rodrigues' formula for an axis-angle vector (angle = norm).
pub fn axis_angle_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    if angle < 1e-12 {
        // second-order expansion keeps the map smooth near zero
        let k = skew(v);
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let k = skew(&(v / angle));
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Homogeneous rigid/affine transform from a linear block and translation.
pub fn homogeneous(linear: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(linear);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

pub fn linear_part(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

pub fn translation_part(m: &Matrix4<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 1>(0, 3).into_owned()
}

pub fn transform_point(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

/// Rotation factor of the polar decomposition `A = R P` (closest proper
/// rotation in Frobenius norm).
pub fn polar_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        let col = -u.column(2);
        u.set_column(2, &col);
        r = u * v_t;
    }
    r
}

/// Frobenius norm of `AᵀA − I`; zero exactly for orthonormal `A`.
pub fn rigidity_deviation(a: &Matrix3<f64>) -> f64 {
    (a.transpose() * a - Matrix3::identity()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_quat_matrix(q: &Quat, k: usize) -> Matrix3<f64> {
        let h = 1e-6;
        let mut qp = *q;
        let mut qm = *q;
        qp[k] += h;
        qm[k] -= h;
        (quat_to_matrix(&qp) - quat_to_matrix(&qm)) / (2.0 * h)
    }

    #[test]
    fn partials_match_finite_differences() {
        let q = quat_normalize(&[0.3, -0.5, 0.7, 0.2]);
        let parts = quat_to_matrix_partials(&q);
        for k in 0..4 {
            assert!((parts[k] - fd_quat_matrix(&q, k)).abs().max() < 1e-8);
        }
    }

    #[test]
    fn product_matrices_agree_with_hamilton_product() {
        let a = [0.1, 0.2, -0.3, 0.9];
        let b = [-0.4, 0.5, 0.6, 0.1];
        let p = quat_mul(&a, &b);
        let l = quat_left_matrix(&a) * Vector4::from(b);
        let r = quat_right_matrix(&b) * Vector4::from(a);
        for i in 0..4 {
            assert!((p[i] - l[i]).abs() < 1e-15);
            assert!((p[i] - r[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn product_composes_rotations() {
        let a = quat_normalize(&[0.1, 0.2, -0.3, 0.9]);
        let b = quat_normalize(&[-0.4, 0.5, 0.6, 0.1]);
        let lhs = quat_to_matrix(&quat_mul(&a, &b));
        let rhs = quat_to_matrix(&a) * quat_to_matrix(&b);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn matrix_quat_round_trip() {
        for q in [[0.9, 0.1, -0.3, 0.2], [0.01, 0.9, 0.3, -0.2], [0.0, 0.0, 0.0, 1.0], [0.0, 0.2, 0.9, 0.1]] {
            let q = quat_normalize(&q);
            let back = matrix_to_quat(&quat_to_matrix(&q));
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..4 {
                assert!((back[i] - sign * q[i]).abs() < 1e-12, "{q:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn rodrigues_quarter_turn() {
        let r = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn polar_rotation_recovers_rotation_of_scaled_matrix() {
        let q = quat_normalize(&[0.5, 0.1, 0.7, -0.2]);
        let r = quat_to_matrix(&q);
        let a = r * Matrix3::from_diagonal(&Vector3::new(0.8, 1.1, 0.9));
        assert!((polar_rotation(&a) - r).abs().max() < 1e-10);
        assert!(rigidity_deviation(&r) < 1e-12);
    }
}
