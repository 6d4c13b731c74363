use nalgebra::Vector3;

use super::GaussError;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients (all three channels) for a degree.
pub fn sh_coeff_count(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

/// Real SH basis values up to `degree`, in the 3DGS ordering (m = −l..l per band).
pub fn sh_basis(dir: &Vector3<f64>, degree: usize) -> [f64; 16] {
    let mut out = [0.0; 16];
    out[0] = SH_C0;
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return out;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    out
}

/// RGB color of a coefficient vector seen along `view_dir`, including the
/// +0.5 band-0 offset. Not clamped.
pub fn eval_sh(sh: &[f64], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3], GaussError> {
    if degree > 3 {
        return Err(GaussError::ShDegree(degree));
    }
    let expected = sh_coeff_count(degree);
    if sh.len() != expected {
        return Err(GaussError::ShLength { degree, expected, got: sh.len() });
    }
    let basis = sh_basis(view_dir, degree);
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().take(expected / 3).enumerate() {
        for c in 0..3 {
            rgb[c] += b * sh[k * 3 + c];
        }
    }
    Ok(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Real SH from spherical coordinates, associated Legendre recurrence with
    /// the Condon–Shortley phase.
    fn oracle_basis(dir: &Vector3<f64>, l: i32, m: i32) -> f64 {
        fn factorial(n: i32) -> f64 {
            (1..=n).map(|v| v as f64).product()
        }
        fn legendre(l: i32, m: i32, x: f64) -> f64 {
            let mut pmm = 1.0;
            if m > 0 {
                let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
                let mut fact = 1.0;
                for _ in 0..m {
                    pmm *= -fact * somx2;
                    fact += 2.0;
                }
            }
            if l == m {
                return pmm;
            }
            let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
            if l == m + 1 {
                return pmmp1;
            }
            let mut pll = 0.0;
            for ll in (m + 2)..=l {
                pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
                pmm = pmmp1;
                pmmp1 = pll;
            }
            pll
        }
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let am = m.abs();
        let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
        let p = legendre(l, am, theta.cos());
        match m.cmp(&0) {
            std::cmp::Ordering::Equal => k * p,
            std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * (m as f64 * phi).cos() * p,
            std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p,
        }
    }

    #[test]
    fn band_zero_is_view_independent() {
        let sh = [0.7, 0.2, 0.1];
        let a = eval_sh(&sh, &Vector3::new(0.0, 0.0, 1.0), 0).unwrap();
        let b = eval_sh(&sh, &Vector3::new(0.6, -0.8, 0.0), 0).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - (SH_C0 * 0.7 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_higher_bands_reduce_to_band_zero() {
        let mut sh1 = vec![0.0; sh_coeff_count(1)];
        sh1[..3].copy_from_slice(&[0.7, 0.2, 0.1]);
        let dir = Vector3::new(0.3, 0.4, -0.5).normalize();
        assert_eq!(eval_sh(&sh1, &dir, 1).unwrap(), eval_sh(&[0.7, 0.2, 0.1], &dir, 0).unwrap());
    }

    #[test]
    fn degree_three_matches_spherical_coordinate_table() {
        let mut state = 17u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let sh: Vec<f64> = (0..48).map(|_| next()).collect();
        for dir in [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.3, -0.7, 0.2).normalize(), Vector3::new(-0.5, 0.1, -0.8).normalize()] {
            let got = eval_sh(&sh, &dir, 3).unwrap();
            let mut expected = [0.5; 3];
            let mut k = 0;
            for l in 0..=3 {
                for m in -l..=l {
                    let y = oracle_basis(&dir, l, m);
                    for c in 0..3 {
                        expected[c] += y * sh[k * 3 + c];
                    }
                    k += 1;
                }
            }
            for c in 0..3 {
                assert!((got[c] - expected[c]).abs() < 1e-10, "{dir:?}: {got:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(eval_sh(&[0.0; 5], &Vector3::z(), 0), Err(GaussError::ShLength { .. })));
        assert!(matches!(eval_sh(&[0.0; 3], &Vector3::z(), 4), Err(GaussError::ShDegree(4))));
    }
}
