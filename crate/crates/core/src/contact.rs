//! Contact retargeting: segment a body part in a frontal render, back-project
//! the mask onto the gaussians that composite into it, threshold, and take
//! the labeled centroid as the object's initial translation.

use std::path::PathBuf;
use std::time::Duration;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gauss::{Camera, GaussianCloud};
use crate::render::{decode_png, encode_png, read_png, visit_contributions, Image, ImageError, RenderError, RenderSettings};
use crate::wire::{decode_bytes, encode_bytes, HttpClient, SegmentRequest, SegmentResponse, TransportError, SEGMENT_PATH};

/// Default label threshold `a`.
pub const DEFAULT_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("no gaussian weight exceeds {threshold:e} for prompt \"{prompt}\"")]
    NotFound { prompt: String, threshold: f64 },
    #[error("mask is {mask_w}×{mask_h} but the render is {width}×{height}")]
    Resolution { mask_w: usize, mask_h: usize, width: usize, height: usize },
    #[error("{0} weights for {1} means")]
    Length(usize, usize),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("mask image: {0}")]
    Image(#[from] ImageError),
}

/// Binary segmentation of a render.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` inside.
    pub values: Vec<bool>,
    pub prompt: String,
}

impl SegmentationMask {
    /// Binarizes the first channel at 0.5.
    pub fn from_image(img: &Image, prompt: &str) -> Self {
        let values = (0..img.width * img.height).map(|p| img.data[p * img.channels] >= 0.5).collect();
        Self { width: img.width, height: img.height, values, prompt: prompt.to_string() }
    }

    pub fn to_image(&self) -> Image {
        Image { width: self.width, height: self.height, channels: 1, data: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect() }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

pub trait Segmenter {
    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationMask, ContactError>;
}

/// Analytic masks in normalized image coordinates `(u, v) ∈ [0, 1]²` at
/// pixel centers, `u` to the right and `v` down. The prompt is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockMask {
    Disk { center: [f64; 2], radius: f64 },
    /// Inside where `normal · (u, v) ≥ offset`.
    HalfPlane { normal: [f64; 2], offset: f64 },
    Zeros,
    /// A PNG mask on disk.
    Fixture { path: PathBuf },
}

impl MockMask {
    pub fn render(&self, width: usize, height: usize, prompt: &str) -> Result<SegmentationMask, ContactError> {
        let analytic = |f: &dyn Fn(f64, f64) -> bool| {
            let mut values = Vec::with_capacity(width * height);
            for y in 0..height {
                for x in 0..width {
                    values.push(f((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64));
                }
            }
            SegmentationMask { width, height, values, prompt: prompt.to_string() }
        };
        Ok(match self {
            MockMask::Disk { center, radius } => analytic(&|u, v| (u - center[0]).powi(2) + (v - center[1]).powi(2) <= radius * radius),
            MockMask::HalfPlane { normal, offset } => analytic(&|u, v| normal[0] * u + normal[1] * v >= *offset),
            MockMask::Zeros => analytic(&|_, _| false),
            MockMask::Fixture { path } => SegmentationMask::from_image(&read_png(path)?, prompt),
        })
    }
}

pub struct MockSegmenter(pub MockMask);

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationMask, ContactError> {
        let m = self.0.render(image.width, image.height, prompt)?;
        if m.is_empty() {
            log::warn!("segmentation of \"{prompt}\" is empty");
        }
        Ok(m)
    }
}

/// Segmentation over the sidecar `/v1/segment` endpoint.
pub struct HttpSegmenter {
    pub client: HttpClient,
}

impl HttpSegmenter {
    pub fn new(base_url: &str) -> Self {
        Self { client: HttpClient::new(base_url, Duration::from_secs(60)) }
    }

    pub fn request(image: &Image, prompt: &str) -> Result<SegmentRequest, ContactError> {
        let (image, image_nbytes) = encode_bytes(&encode_png(image)?);
        Ok(SegmentRequest { image, image_nbytes, prompt: prompt.to_string() })
    }

    pub fn parse(resp: &SegmentResponse, width: usize, height: usize, prompt: &str) -> Result<SegmentationMask, ContactError> {
        let png = decode_bytes("mask", &resp.mask, resp.mask_nbytes)?;
        let img = decode_png(&png)?;
        if img.width != width || img.height != height {
            return Err(ContactError::Resolution { mask_w: img.width, mask_h: img.height, width, height });
        }
        Ok(SegmentationMask::from_image(&img, prompt))
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationMask, ContactError> {
        let resp: SegmentResponse = self.client.post(SEGMENT_PATH, &Self::request(image, prompt)?)?;
        let m = Self::parse(&resp, image.width, image.height, prompt)?;
        if m.is_empty() {
            log::warn!("segmentation of \"{prompt}\" is empty");
        }
        Ok(m)
    }
}

/// Frontal segmentation camera: radius 2, elevation 0, FoV 49.1°, 512².
pub fn frontal_camera(target: Vector3<f64>) -> Camera {
    Camera::orbit(target, 2.0, 0.0, 0.0, 49.1, 512, 512)
}

/// `w_i = Σ_{u ∈ M} g_i(u)·T_i(u)` using the rasterizer's own contributions.
pub fn backproject_mask(cloud: &GaussianCloud, camera: &Camera, mask: &SegmentationMask, settings: &RenderSettings) -> Result<Vec<f64>, ContactError> {
    if mask.width != camera.width || mask.height != camera.height {
        return Err(ContactError::Resolution { mask_w: mask.width, mask_h: mask.height, width: camera.width, height: camera.height });
    }
    let mut w = vec![0.0; cloud.len()];
    if mask.is_empty() {
        return Ok(w);
    }
    visit_contributions(cloud, camera, settings, |pixel, i, c| {
        if mask.values[pixel] {
            w[i] += c;
        }
    })?;
    Ok(w)
}

/// Sum of single-view weights over several views (for parts occluded in the
/// frontal view).
pub fn backproject_views(cloud: &GaussianCloud, views: &[(Camera, SegmentationMask)], settings: &RenderSettings) -> Result<Vec<f64>, ContactError> {
    let mut total = vec![0.0; cloud.len()];
    for (cam, mask) in views {
        for (t, w) in total.iter_mut().zip(backproject_mask(cloud, cam, mask, settings)?) {
            *t += w;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactLabels {
    pub weights: Vec<f64>,
    pub labels: Vec<bool>,
    pub threshold: f64,
    pub t_init: [f64; 3],
}

impl ContactLabels {
    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Labels `w_i > a` and the centroid of the labeled means; with `soft` the
/// centroid is weighted by `w_i` instead of 0/1.
pub fn classify_and_init(weights: &[f64], means: &[Vector3<f64>], threshold: f64, prompt: &str, soft: bool) -> Result<ContactLabels, ContactError> {
    if weights.len() != means.len() {
        return Err(ContactError::Length(weights.len(), means.len()));
    }
    let labels: Vec<bool> = weights.iter().map(|&w| w > threshold).collect();
    let mut sum = Vector3::zeros();
    let mut norm = 0.0;
    for ((m, &w), &l) in means.iter().zip(weights).zip(&labels) {
        if l {
            let k = if soft { w } else { 1.0 };
            sum += k * m;
            norm += k;
        }
    }
    if norm == 0.0 {
        return Err(ContactError::NotFound { prompt: prompt.to_string(), threshold });
    }
    Ok(ContactLabels { weights: weights.to_vec(), labels, threshold, t_init: (sum / norm).into() })
}

/// Full retargeting: frontal render, segmentation, back-projection,
/// labeling. Returns the labels, the render and the mask.
pub fn retarget(
    human: &GaussianCloud,
    prompt: &str,
    segmenter: &dyn Segmenter,
    camera: &Camera,
    settings: &RenderSettings,
    threshold: f64,
    soft: bool,
) -> Result<(ContactLabels, Image, SegmentationMask), ContactError> {
    let render = crate::render::rasterize(human, camera, settings)?;
    let mask = segmenter.segment(&render.rgb, prompt)?;
    if mask.width != camera.width || mask.height != camera.height {
        return Err(ContactError::Resolution { mask_w: mask.width, mask_h: mask.height, width: camera.width, height: camera.height });
    }
    let w = backproject_mask(human, camera, &mask, settings)?;
    let labels = classify_and_init(&w, &human.means, threshold, prompt, soft)?;
    Ok((labels, render.rgb, mask))
}

/// Mask overlay for debugging: masked pixels tinted red.
pub fn overlay(render: &Image, mask: &SegmentationMask) -> Image {
    let mut out = render.clone();
    for (p, &m) in mask.values.iter().enumerate() {
        if m && out.channels == 3 {
            let px = &mut out.data[3 * p..3 * p + 3];
            px[0] = 0.5 * px[0] + 0.5;
            px[1] *= 0.5;
            px[2] *= 0.5;
        }
    }
    out
}
