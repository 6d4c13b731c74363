//! Software splat rasterizer.
//!
//! Every gaussian is projected to a 2D splat (EWA linearization with a
//! `cov2d_floor` pixel² regularizer), sorted front-to-back by camera depth with
//! ties broken by index, and composited per pixel as
//!
//! ```text
//! C(u) = Σᵢ cᵢ gᵢ Πⱼ<ᵢ (1 − gⱼ) + bg · Πᵢ (1 − gᵢ),   gᵢ = αᵢ exp(−½ dᵀ Σ₂⁻¹ d)
//! ```
//!
//! Contributions with `gᵢ < min_contribution` are skipped. Depth is the
//! alpha-weighted camera-space z, normalized by accumulated alpha where alpha
//! exceeds `1e-4`.
//!
//! Two forward paths exist: the tiled one ([`rasterize`],
//! [`rasterize_with_pullback`]) bins splats into 16×16 tiles using the exact
//! bounding box of the contribution cutoff, and the reference one
//! ([`rasterize_reference`]) evaluates every splat at every pixel. Both produce
//! a [`Pullback`] that maps image-space gradients onto cloud attributes. The
//! sort permutation is treated as locally constant. For SH degree > 0 the view
//! direction's dependence on the mean is not differentiated.

mod backward;
mod image;
mod project;

pub use backward::{CloudGrad, Pullback, RenderGrad, SplatGrad};
pub use image::{decode_png, encode_png, read_png, read_raw_image, write_png_depth16, write_png_rgb, write_raw_image, Image, ImageError};
pub use project::{project, Projection};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gauss::{eval_sh, Camera, CameraError, GaussError, GaussianCloud};

/// Largest image area accepted by the exhaustive reference path.
pub const REFERENCE_MAX_PIXELS: usize = 128 * 128;

/// Accumulated alpha below which depth is reported as 0.
pub const DEPTH_ALPHA_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("reference rasterizer is limited to {max} pixels, got {width}×{height}; render at ≤128×128 or use the tiled path")]
    TooLarge { width: usize, height: usize, max: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Added to the diagonal of every projected covariance, in pixels².
    pub cov2d_floor: f64,
    pub min_contribution: f64,
    pub tile_size: usize,
    /// Splits work across rayon threads. Results do not depend on this flag:
    /// every reduction happens in a fixed order.
    pub parallel: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [1.0; 3], cov2d_floor: 0.3, min_contribution: 1.0 / 255.0, tile_size: 8, parallel: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub alpha: Image,
}

/// A projected gaussian with everything the compositor and the pullback need.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean2d: [f64; 2],
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub color_active: [bool; 3],
    pub depth: f64,
    pub extent: [f64; 2],
    /// Quadratic-form value beyond which `g` is surely below the minimum
    /// contribution; lets pixels skip the exponential.
    pub power_cut: f64,
    pub t_cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
}

impl Splat {
    /// Contribution `g` and the unweighted kernel `e = g / α` at a pixel center.
    #[inline]
    pub fn eval(&self, px: f64, py: f64) -> (f64, f64, f64, f64) {
        let (power, dx, dy) = self.power(px, py);
        let e = (-0.5 * power).exp();
        (self.opacity * e, e, dx, dy)
    }

    /// `dᵀ A d` at a pixel center, with the offsets.
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let c = &self.conic;
        (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy, dx, dy)
    }
}

/// Per-frame camera constants.
#[derive(Clone, Debug)]
pub(crate) struct View {
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

impl View {
    pub fn new(camera: &Camera) -> Result<Self, CameraError> {
        camera.validate()?;
        let (fx, fy, cx, cy) = camera.intrinsics();
        Ok(Self {
            rotation: camera.rotation(),
            origin: camera.origin(),
            fx,
            fy,
            cx,
            cy,
            near: camera.near,
            far: camera.far,
            width: camera.width,
            height: camera.height,
        })
    }
}

pub(crate) fn prepare_splats(cloud: &GaussianCloud, view: &View, settings: &RenderSettings) -> Result<Vec<Splat>, RenderError> {
    cloud.validate()?;
    let mut splats = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let opacity = cloud.opacities[i];
        if !(opacity >= settings.min_contribution) {
            continue;
        }
        let cov = cloud.covariance(i)?;
        let Some(p) = project::project_view(&cloud.means[i], &cov, view, settings.cov2d_floor) else {
            continue;
        };
        let Some(conic) = p.cov2d.try_inverse() else {
            continue;
        };
        let dir = (cloud.means[i] - view.origin).normalize();
        let raw = eval_sh(cloud.sh_of(i), &dir, cloud.sh_degree)?;
        let mut color = [0.0; 3];
        let mut color_active = [true; 3];
        for c in 0..3 {
            color[c] = raw[c].clamp(0.0, 1.0);
            color_active[c] = raw[c] == color[c];
        }
        let m2 = 2.0 * (opacity / settings.min_contribution).ln();
        let extent = [(m2 * p.cov2d[(0, 0)]).sqrt() + 1.0, (m2 * p.cov2d[(1, 1)]).sqrt() + 1.0];
        splats.push(Splat {
            index: i,
            mean2d: [p.mean2d.x, p.mean2d.y],
            conic,
            opacity,
            color,
            color_active,
            depth: p.depth,
            extent,
            // margin keeps the skip strictly conservative under rounding
            power_cut: m2 * (1.0 + 1e-9) + 1e-9,
            t_cam: p.t_cam,
            jac: p.jac,
            cov_cam: p.cov_cam,
        });
    }
    // front-to-back, stable by index on ties
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

/// Splat lists per tile, or one global list for the exhaustive path.
#[derive(Clone, Debug)]
pub(crate) enum Bins {
    Exhaustive,
    Tiled { tile: usize, tiles_x: usize, lists: Vec<Vec<u32>> },
}

impl Bins {
    fn tiled(splats: &[Splat], width: usize, height: usize, tile: usize) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            // pixel i is covered when |i + 0.5 − mx| ≤ extent
            let x0 = (s.mean2d[0] - s.extent[0] - 0.5).ceil().max(0.0);
            let x1 = (s.mean2d[0] + s.extent[0] - 0.5).floor().min(width as f64 - 1.0);
            let y0 = (s.mean2d[1] - s.extent[1] - 0.5).ceil().max(0.0);
            let y1 = (s.mean2d[1] + s.extent[1] - 0.5).floor().min(height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / tile, x1 as usize / tile);
            let (ty0, ty1) = (y0 as usize / tile, y1 as usize / tile);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Bins::Tiled { tile, tiles_x, lists }
    }

    /// Splat ids (indices into the sorted splat array) relevant to a pixel.
    fn for_pixel<'a>(&'a self, x: usize, y: usize, all: &'a [u32]) -> &'a [u32] {
        match self {
            Bins::Exhaustive => all,
            Bins::Tiled { tile, tiles_x, lists } => &lists[(y / tile) * tiles_x + x / tile],
        }
    }
}

/// Result of compositing one pixel.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PixelValue {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth_raw: f64,
}

/// Front-to-back compositing of one pixel. When `trace` is given, it receives
/// `(splat id, g, transmittance before the splat)` for every contribution.
#[inline]
pub(crate) fn shade_pixel(
    px: f64,
    py: f64,
    ids: &[u32],
    splats: &[Splat],
    settings: &RenderSettings,
    mut trace: Option<&mut Vec<(u32, f64, f64)>>,
) -> PixelValue {
    let mut t = 1.0;
    let mut out = PixelValue::default();
    for &id in ids {
        let s = &splats[id as usize];
        let (power, ..) = s.power(px, py);
        if power > s.power_cut {
            continue;
        }
        let g = s.opacity * (-0.5 * power).exp();
        if g < settings.min_contribution {
            continue;
        }
        let w = g * t;
        for c in 0..3 {
            out.rgb[c] += w * s.color[c];
        }
        out.depth_raw += w * s.depth;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((id, g, t));
        }
        t *= 1.0 - g;
    }
    for c in 0..3 {
        out.rgb[c] += t * settings.background[c];
    }
    out.alpha = 1.0 - t;
    out
}

pub(crate) fn final_depth(p: &PixelValue) -> f64 {
    if p.alpha > DEPTH_ALPHA_EPS {
        p.depth_raw / p.alpha
    } else {
        0.0
    }
}

/// Everything needed to evaluate (and differentiate) one render.
pub(crate) struct Frame {
    pub view: View,
    pub settings: RenderSettings,
    pub splats: Vec<Splat>,
    pub bins: Bins,
    pub all_ids: Vec<u32>,
}

impl Frame {
    pub fn build(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings, exhaustive: bool) -> Result<Self, RenderError> {
        let view = View::new(camera)?;
        if exhaustive && view.width * view.height > REFERENCE_MAX_PIXELS {
            return Err(RenderError::TooLarge { width: view.width, height: view.height, max: REFERENCE_MAX_PIXELS });
        }
        let splats = prepare_splats(cloud, &view, settings)?;
        let bins = if exhaustive {
            Bins::Exhaustive
        } else {
            Bins::tiled(&splats, view.width, view.height, settings.tile_size.max(1))
        };
        let all_ids = if exhaustive { (0..splats.len() as u32).collect() } else { Vec::new() };
        Ok(Self { view, settings: settings.clone(), splats, bins, all_ids })
    }

    /// Rows are processed in bands of `band` rows; bands are independent.
    pub fn band_height(&self) -> usize {
        match &self.bins {
            Bins::Tiled { tile, .. } => *tile,
            Bins::Exhaustive => 8,
        }
    }

    pub fn ids(&self, x: usize, y: usize) -> &[u32] {
        self.bins.for_pixel(x, y, &self.all_ids)
    }

    fn render_band(&self, y0: usize, y1: usize) -> Vec<PixelValue> {
        let w = self.view.width;
        let mut out = Vec::with_capacity((y1 - y0) * w);
        for y in y0..y1 {
            for x in 0..w {
                out.push(shade_pixel(x as f64 + 0.5, y as f64 + 0.5, self.ids(x, y), &self.splats, &self.settings, None));
            }
        }
        out
    }

    pub fn bands(&self) -> Vec<(usize, usize)> {
        let h = self.view.height;
        let b = self.band_height();
        (0..h.div_ceil(b)).map(|i| (i * b, ((i + 1) * b).min(h))).collect()
    }

    pub fn render(&self) -> RenderOutput {
        let bands = self.bands();
        let chunks: Vec<Vec<PixelValue>> = if self.settings.parallel {
            bands.par_iter().map(|&(a, b)| self.render_band(a, b)).collect()
        } else {
            bands.iter().map(|&(a, b)| self.render_band(a, b)).collect()
        };
        let (w, h) = (self.view.width, self.view.height);
        let mut rgb = Image::new(w, h, 3);
        let mut alpha = Image::new(w, h, 1);
        let mut depth = Image::new(w, h, 1);
        for (k, p) in chunks.iter().flatten().enumerate() {
            rgb.data[3 * k..3 * k + 3].copy_from_slice(&p.rgb);
            alpha.data[k] = p.alpha;
            depth.data[k] = final_depth(p);
        }
        RenderOutput { rgb, depth, alpha }
    }
}

/// Tiled forward render.
pub fn rasterize(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput, RenderError> {
    Ok(Frame::build(cloud, camera, settings, false)?.render())
}

/// Tiled forward render plus a pullback sharing its tile lists.
pub fn rasterize_with_pullback(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<(RenderOutput, Pullback), RenderError> {
    let frame = Frame::build(cloud, camera, settings, false)?;
    let out = frame.render();
    Ok((out, Pullback::new(frame, cloud)))
}

/// Exhaustive per-pixel reference render (every splat tested at every pixel),
/// limited to [`REFERENCE_MAX_PIXELS`].
pub fn rasterize_reference(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<(RenderOutput, Pullback), RenderError> {
    let frame = Frame::build(cloud, camera, settings, true)?;
    let out = frame.render();
    Ok((out, Pullback::new(frame, cloud)))
}

/// Calls `visit(pixel_index, gaussian_index, weight)` for every compositing
/// contribution `gᵢ·Πⱼ<ᵢ(1−gⱼ)` of the render, in pixel order and
/// front-to-back within a pixel.
pub fn visit_contributions(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    mut visit: impl FnMut(usize, usize, f64),
) -> Result<(), RenderError> {
    let frame = Frame::build(cloud, camera, settings, false)?;
    let mut trace = Vec::new();
    let w = frame.view.width;
    for y in 0..frame.view.height {
        for x in 0..w {
            trace.clear();
            shade_pixel(x as f64 + 0.5, y as f64 + 0.5, frame.ids(x, y), &frame.splats, &frame.settings, Some(&mut trace));
            for &(id, g, t) in &trace {
                visit(y * w + x, frame.splats[id as usize].index, g * t);
            }
        }
    }
    Ok(())
}
