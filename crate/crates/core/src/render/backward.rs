use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{shade_pixel, Frame, RenderError, DEPTH_ALPHA_EPS};
use crate::gauss::{GaussianCloud, SH_C0};
use crate::math::{self, Quat};

/// Upstream gradients on the three render outputs, laid out like the images
/// (`rgb` is `H·W·3`, `depth` and `alpha` are `H·W`). Empty buffers mean zero.
#[derive(Clone, Debug, Default)]
pub struct RenderGrad {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Gradient with respect to a splat's 2D parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub opacity: f64,
    pub mean2d: [f64; 2],
    /// Matrix gradient with respect to the conic, entries (00, 01, 11); the
    /// 01 entry applies to both off-diagonal positions.
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.opacity += o.opacity;
        self.depth += o.depth;
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
    }
}

/// Gradient with respect to cloud attributes. `sh_dc` covers only the band-0
/// coefficients; rotations are with respect to the stored (raw) quaternions.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub sh_dc: Vec<[f64; 3]>,
}

impl CloudGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            sh_dc: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn add_assign(&mut self, o: &CloudGrad) {
        for i in 0..self.len().min(o.len()) {
            self.means[i] += o.means[i];
            self.scales[i] += o.scales[i];
            self.opacities[i] += o.opacities[i];
            for k in 0..4 {
                self.rotations[i][k] += o.rotations[i][k];
            }
            for k in 0..3 {
                self.sh_dc[i][k] += o.sh_dc[i][k];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().flatten().all(|x| x.is_finite())
            && self.opacities.iter().all(|x| x.is_finite())
            && self.sh_dc.iter().flatten().all(|x| x.is_finite())
    }
}

/// Reverse-mode map from image-space gradients to cloud attributes for one
/// render. Recomputes the per-pixel compositing on demand.
pub struct Pullback {
    frame: Frame,
    n: usize,
    rotations: Vec<Quat>,
    scales: Vec<Vector3<f64>>,
}

impl Pullback {
    pub(crate) fn new(frame: Frame, cloud: &GaussianCloud) -> Self {
        Self { frame, n: cloud.len(), rotations: cloud.rotations.clone(), scales: cloud.scales.clone() }
    }

    pub fn width(&self) -> usize {
        self.frame.view.width
    }

    pub fn height(&self) -> usize {
        self.frame.view.height
    }

    /// Gradients on the projected splats, indexed by gaussian.
    pub fn splat_grads(&self, upstream: &RenderGrad) -> Result<Vec<SplatGrad>, RenderError> {
        let px = self.width() * self.height();
        for (buf, per) in [(&upstream.rgb, 3), (&upstream.depth, 1), (&upstream.alpha, 1)] {
            if !buf.is_empty() && buf.len() != px * per {
                return Err(RenderError::GradientShape { expected: px * per, got: buf.len() });
            }
        }
        let bands = self.frame.bands();
        let run = |&(y0, y1): &(usize, usize)| self.band_grads(upstream, y0, y1);
        // per-band buffers are reduced in band order so the sum is reproducible
        let parts: Vec<Vec<SplatGrad>> = if self.frame.settings.parallel {
            bands.par_iter().map(run).collect()
        } else {
            bands.iter().map(run).collect()
        };
        let mut sorted = vec![SplatGrad::default(); self.frame.splats.len()];
        for part in &parts {
            for (acc, g) in sorted.iter_mut().zip(part) {
                acc.add(g);
            }
        }
        let mut out = vec![SplatGrad::default(); self.n];
        for (s, g) in self.frame.splats.iter().zip(&sorted) {
            out[s.index] = *g;
        }
        Ok(out)
    }

    fn band_grads(&self, up: &RenderGrad, y0: usize, y1: usize) -> Vec<SplatGrad> {
        let frame = &self.frame;
        let w = frame.view.width;
        let bg = frame.settings.background;
        let mut acc = vec![SplatGrad::default(); frame.splats.len()];
        let mut trace = Vec::new();
        for y in y0..y1 {
            for x in 0..w {
                let p = y * w + x;
                let gc = if up.rgb.is_empty() { [0.0; 3] } else { [up.rgb[3 * p], up.rgb[3 * p + 1], up.rgb[3 * p + 2]] };
                let g_depth = up.depth.get(p).copied().unwrap_or(0.0);
                let g_alpha = up.alpha.get(p).copied().unwrap_or(0.0);
                if gc == [0.0; 3] && g_depth == 0.0 && g_alpha == 0.0 {
                    continue;
                }
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                trace.clear();
                let val = shade_pixel(cx, cy, frame.ids(x, y), &frame.splats, &frame.settings, Some(&mut trace));
                // depth = D/A: fold its gradient into raw depth and alpha
                let (d_raw, d_alpha) = if val.alpha > DEPTH_ALPHA_EPS {
                    (g_depth / val.alpha, g_alpha - g_depth * val.depth_raw / (val.alpha * val.alpha))
                } else {
                    (0.0, g_alpha)
                };
                // Each output is Σ wᵢ vᵢ + T_end·v_bg with per-output values
                // folded into one scalar vᵢ; dL/dgᵢ = Tᵢ (vᵢ − Bᵢ) where Bᵢ is
                // the composite of everything behind splat i.
                let mut behind = gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2];
                for &(id, g, t) in trace.iter().rev() {
                    let s = &frame.splats[id as usize];
                    let v = gc[0] * s.color[0] + gc[1] * s.color[1] + gc[2] * s.color[2] + d_alpha + d_raw * s.depth;
                    let dg = t * (v - behind);
                    behind = g * v + (1.0 - g) * behind;

                    let a = &mut acc[id as usize];
                    let w_i = g * t;
                    for c in 0..3 {
                        a.color[c] += w_i * gc[c];
                    }
                    a.depth += w_i * d_raw;
                    let (_, e, dx, dy) = s.eval(cx, cy);
                    a.opacity += dg * e;
                    // g = α exp(−½ dᵀ A d), d = p − μ
                    let k = dg * g;
                    let c = &s.conic;
                    a.mean2d[0] += k * (c[(0, 0)] * dx + c[(0, 1)] * dy);
                    a.mean2d[1] += k * (c[(0, 1)] * dx + c[(1, 1)] * dy);
                    a.conic[0] -= 0.5 * k * dx * dx;
                    a.conic[1] -= 0.5 * k * dx * dy;
                    a.conic[2] -= 0.5 * k * dy * dy;
                }
            }
        }
        acc
    }

    /// Full pullback to cloud attributes.
    pub fn apply(&self, upstream: &RenderGrad) -> Result<CloudGrad, RenderError> {
        let grads = self.splat_grads(upstream)?;
        let view = &self.frame.view;
        let mut out = CloudGrad::zeros(self.n);
        for s in &self.frame.splats {
            let g = &grads[s.index];
            let i = s.index;
            out.opacities[i] = g.opacity;
            for c in 0..3 {
                if s.color_active[c] {
                    out.sh_dc[i][c] = SH_C0 * g.color[c];
                }
            }

            // conic A = Σ₂⁻¹  ⇒  dΣ₂ = −A G A
            let gm = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
            let d_cov2d = -(s.conic * gm * s.conic);
            // Σ₂ = J M Jᵀ + floor·I
            let jac: &Matrix2x3<f64> = &s.jac;
            let d_cov_cam = jac.transpose() * d_cov2d * jac;
            let d_jac = 2.0 * d_cov2d * jac * s.cov_cam;
            let d_cov3 = view.rotation.transpose() * d_cov_cam * view.rotation;

            let (x, y, z) = (s.t_cam.x, s.t_cam.y, s.t_cam.z);
            let (fx, fy) = (view.fx, view.fy);
            let d_uv = Vector2::new(g.mean2d[0], g.mean2d[1]);
            let z2 = z * z;
            let z3 = z2 * z;
            let mut d_t = Vector3::new(
                d_uv.x * fx / z - d_jac[(0, 2)] * fx / z2,
                d_uv.y * fy / z - d_jac[(1, 2)] * fy / z2,
                -d_uv.x * fx * x / z2 - d_uv.y * fy * y / z2,
            );
            d_t.z += -d_jac[(0, 0)] * fx / z2 + d_jac[(0, 2)] * 2.0 * fx * x / z3 - d_jac[(1, 1)] * fy / z2
                + d_jac[(1, 2)] * 2.0 * fy * y / z3;
            d_t.z += g.depth;
            out.means[i] = view.rotation.transpose() * d_t;

            // Σ₃ = N Nᵀ, N = R·diag(s)
            let q = math::quat_normalize(&self.rotations[i]);
            let r = math::quat_to_matrix(&q);
            let sc = self.scales[i];
            let n_mat = r * Matrix3::from_diagonal(&sc);
            let sym = 0.5 * (d_cov3 + d_cov3.transpose());
            let d_n = 2.0 * sym * n_mat;
            let d_r = d_n * Matrix3::from_diagonal(&sc);
            for j in 0..3 {
                out.scales[i][j] = (0..3).map(|k| d_n[(k, j)] * r[(k, j)]).sum();
            }
            let d_q = math::matrix_grad_to_quat(&q, &d_r);
            out.rotations[i] = math::normalize_pullback(&self.rotations[i], &d_q);
        }
        Ok(out)
    }
}
