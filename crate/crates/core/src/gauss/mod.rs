//! 3D Gaussian data model.
//!
//! A [`GaussianCloud`] stores per-primitive means, unit rotations, linear
//! (already activated) scales, opacities in `[0, 1]` and real spherical
//! harmonic coefficients. Covariances are `R·diag(s)²·Rᵀ`.
//!
//! Colors follow the usual 3DGS convention: the band-0 color of a channel is
//! `0.28209479·c₀ + 0.5`, so assets exported by common splatting tools keep
//! their colors. Activations (sigmoid opacity, exp scale) only exist at the PLY
//! boundary.

mod camera;
mod placement;
pub mod ply;
mod sh;

pub use camera::{Camera, CameraError};
pub use placement::{apply_placement, Placement, PlacementGrad, PlacementJacobian};
pub use sh::{eval_sh, sh_basis, sh_coeff_count, SH_C0};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::math::{self, Quat};

/// Quaternion norm deviation tolerated before a rotation is renormalized.
pub const UNIT_QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GaussError {
    #[error("scale of gaussian {index} is not strictly positive: {value:?}")]
    NonPositiveScale { index: usize, value: [f64; 3] },
    #[error("attribute `{attribute}` has {got} entries, expected {expected}")]
    LengthMismatch { attribute: &'static str, expected: usize, got: usize },
    #[error("spherical harmonic vector has {got} coefficients, degree {degree} needs {expected}")]
    ShLength { degree: usize, expected: usize, got: usize },
    #[error("unsupported spherical harmonic degree {0} (0..=3)")]
    ShDegree(usize),
    #[error("covariance is singular or ill-conditioned (condition {condition:.3e}); add {regularization:.3e}·I")]
    SingularCovariance { condition: f64, regularization: f64 },
    #[error("global placement scale must be positive, got {0}")]
    NonPositivePlacementScale(f64),
    #[error("non-finite value in attribute `{0}`")]
    NonFinite(&'static str),
}

/// A set of anisotropic 3D Gaussians.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianCloud {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    /// Flat coefficients, `sh_coeff_count(sh_degree)` per gaussian, laid out
    /// coefficient-major: `[k * 3 + channel]`.
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self { sh_degree, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn coeffs_per_point(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.coeffs_per_point();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.coeffs_per_point();
        &mut self.sh[i * k..(i + 1) * k]
    }

    /// Appends one gaussian with a flat band-0 color given in `[0, 1]` RGB.
    pub fn push_colored(&mut self, mean: Vector3<f64>, rotation: Quat, scale: Vector3<f64>, opacity: f64, rgb: [f64; 3]) {
        self.means.push(mean);
        self.rotations.push(math::quat_normalize(&rotation));
        self.scales.push(scale);
        self.opacities.push(opacity.clamp(0.0, 1.0));
        let k = self.coeffs_per_point();
        let start = self.sh.len();
        self.sh.resize(start + k, 0.0);
        for c in 0..3 {
            self.sh[start + c] = (rgb[c] - 0.5) / SH_C0;
        }
    }

    /// Concatenates `other` after `self`. Both must share the SH degree.
    pub fn extend_from(&mut self, other: &GaussianCloud) -> Result<(), GaussError> {
        if other.sh_degree != self.sh_degree && !other.is_empty() {
            return Err(GaussError::ShLength {
                degree: self.sh_degree,
                expected: self.coeffs_per_point(),
                got: other.coeffs_per_point(),
            });
        }
        self.means.extend_from_slice(&other.means);
        self.rotations.extend_from_slice(&other.rotations);
        self.scales.extend_from_slice(&other.scales);
        self.opacities.extend_from_slice(&other.opacities);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    /// Checks every structural invariant of the cloud.
    pub fn validate(&self) -> Result<(), GaussError> {
        let n = self.len();
        let check = |attribute, got| {
            if got != n {
                Err(GaussError::LengthMismatch { attribute, expected: n, got })
            } else {
                Ok(())
            }
        };
        check("rotations", self.rotations.len())?;
        check("scales", self.scales.len())?;
        check("opacities", self.opacities.len())?;
        if self.sh_degree > 3 {
            return Err(GaussError::ShDegree(self.sh_degree));
        }
        let k = self.coeffs_per_point();
        if self.sh.len() != n * k {
            return Err(GaussError::LengthMismatch { attribute: "sh", expected: n * k, got: self.sh.len() });
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
                return Err(GaussError::NonPositiveScale { index: i, value: [s.x, s.y, s.z] });
            }
        }
        if self.means.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(GaussError::NonFinite("means"));
        }
        if self.opacities.iter().any(|a| !a.is_finite()) || self.sh.iter().any(|v| !v.is_finite()) {
            return Err(GaussError::NonFinite("opacities/sh"));
        }
        Ok(())
    }

    /// Restores the cheap invariants after an unconstrained update:
    /// renormalizes quaternions and clamps opacities.
    pub fn sanitize(&mut self) {
        for q in &mut self.rotations {
            if (math::quat_norm(q) - 1.0).abs() > 0.0 {
                *q = math::quat_normalize(q);
            }
        }
        for a in &mut self.opacities {
            *a = a.clamp(0.0, 1.0);
        }
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix3<f64>, GaussError> {
        covariance_from(&self.rotations[i], &self.scales[i])
    }

    /// Axis-aligned bounds of the means, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.means.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for m in &self.means {
            lo = lo.inf(m);
            hi = hi.sup(m);
        }
        Some((lo, hi))
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.is_empty() {
            return None;
        }
        Some(self.means.iter().sum::<Vector3<f64>>() / self.len() as f64)
    }
}

/// `R·diag(s)·diag(s)·Rᵀ` for a rotation quaternion and positive scales.
///
/// The quaternion is always normalized; one further than
/// [`UNIT_QUAT_TOLERANCE`] from unit norm also logs a warning.
pub fn covariance_from(q: &Quat, s: &Vector3<f64>) -> Result<Matrix3<f64>, GaussError> {
    if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
        return Err(GaussError::NonPositiveScale { index: 0, value: [s.x, s.y, s.z] });
    }
    let norm = math::quat_norm(q);
    if (norm - 1.0).abs() > UNIT_QUAT_TOLERANCE {
        log::warn!("covariance_from: quaternion norm {norm} normalized");
    }
    let r = math::quat_to_matrix(&math::quat_normalize(q));
    let m = r * Matrix3::from_diagonal(s);
    Ok(m * m.transpose())
}

/// Unnormalized gaussian kernel `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn eval_kernel(x: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64, GaussError> {
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(GaussError::SingularCovariance { condition, regularization: 1e-8 * cov.trace() });
    }
    let chol = cov.cholesky().ok_or(GaussError::SingularCovariance {
        condition,
        regularization: 1e-8 * cov.trace(),
    })?;
    let d = x - mean;
    let y = chol.solve(&d);
    Ok((-0.5 * d.dot(&y)).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
