//! Factored spatiotemporal feature field with an MLP head.
//!
//! Six 2D feature grids over the axis pairs xy, xz, yz, xt, yt, zt are
//! bilinearly sampled and concatenated into one feature vector, which an MLP
//! (SiLU hidden layers, linear output) maps to an offset. The final layer is
//! zero-initialized, so a fresh field predicts exactly zero everywhere.
//!
//! All trainable values live in one flat parameter vector (planes first, then
//! each layer's weights in column-major order followed by its bias), which is
//! what the optimizer and the checkpoint see.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Debug, Error)]
pub enum HexPlaneError {
    #[error("hexplane i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("hexplane checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid hexplane configuration: {0}")]
    Config(String),
    #[error("checkpoint holds {got} bytes, metadata declares {expected}")]
    BlobSize { expected: usize, got: usize },
    #[error("unsupported checkpoint dtype {0:?}; expected \"f32\" or \"f64\"")]
    Dtype(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneConfig {
    /// Grid nodes per axis (spatial and temporal).
    pub resolution: usize,
    pub feature_len: usize,
    pub hidden: Vec<usize>,
    /// 3 for position offsets, 10 to also predict rotation (4) and scale (3).
    pub out_dim: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub init_range: f64,
}

impl Default for HexPlaneConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            feature_len: 128,
            hidden: vec![64, 64],
            out_dim: 3,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
            init_range: 0.1,
        }
    }
}

impl HexPlaneConfig {
    /// Channels per plane: `feature_len` split as evenly as possible, the
    /// remainder going to the first planes.
    pub fn channels(&self) -> [usize; 6] {
        let (q, r) = (self.feature_len / 6, self.feature_len % 6);
        std::array::from_fn(|p| q + usize::from(p < r))
    }

    pub fn validate(&self) -> Result<(), HexPlaneError> {
        if self.resolution < 2 {
            return Err(HexPlaneError::Config(format!("resolution must be ≥ 2, got {}", self.resolution)));
        }
        if self.feature_len < 6 {
            return Err(HexPlaneError::Config(format!("feature length must be ≥ 6, got {}", self.feature_len)));
        }
        if self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(HexPlaneError::Config("layer widths must be positive".into()));
        }
        if (0..3).any(|a| !(self.bounds_max[a] > self.bounds_min[a])) {
            return Err(HexPlaneError::Config(format!("degenerate bounds {:?}..{:?}", self.bounds_min, self.bounds_max)));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.feature_len];
        widths.extend(&self.hidden);
        widths.push(self.out_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Bilinear sample location on one plane.
#[derive(Clone, Copy, Debug)]
struct Corner {
    i: usize,
    j: usize,
    fi: f64,
    fj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexPlaneField {
    pub config: HexPlaneConfig,
    pub params: Vec<f64>,
    plane_offsets: [usize; 6],
    layer_offsets: Vec<(usize, usize)>,
}

/// Cached forward state for a batch, consumed by [`HexPlaneField::backward`].
pub struct BatchForward {
    corners: Vec<[Corner; 6]>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    /// `out_dim × N`.
    pub output: DMatrix<f64>,
    /// Whether any query fell outside the bounds or time range.
    pub clamped: bool,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl HexPlaneField {
    pub fn new(config: HexPlaneConfig, seed: u64) -> Result<Self, HexPlaneError> {
        let mut field = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = field.config.init_range;
        let grid_end = field.layer_offsets[0].0;
        for v in &mut field.params[..grid_end] {
            *v = rng.random_range(-r..=r);
        }
        let dims = field.config.layer_dims();
        for (l, &(out, inp)) in dims.iter().enumerate() {
            if l + 1 == dims.len() {
                break; // zero head
            }
            let bound = (6.0 / (inp + out) as f64).sqrt();
            let (w, _) = field.layer_offsets[l];
            for v in &mut field.params[w..w + out * inp] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(field)
    }

    /// All parameters zero; useful for tests and as a load target.
    pub fn zeros(config: HexPlaneConfig) -> Result<Self, HexPlaneError> {
        config.validate()?;
        let res = config.resolution;
        let ch = config.channels();
        let mut off = 0;
        let plane_offsets = std::array::from_fn(|p| {
            let o = off;
            off += res * res * ch[p];
            o
        });
        let mut layer_offsets = Vec::new();
        for (out, inp) in config.layer_dims() {
            layer_offsets.push((off, off + out * inp));
            off += out * inp + out;
        }
        Ok(Self { config, params: vec![0.0; off], plane_offsets, layer_offsets })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Range of the flat parameter vector holding plane `p`.
    pub fn plane_range(&self, p: usize) -> std::ops::Range<usize> {
        let ch = self.config.channels()[p];
        let r = self.config.resolution;
        self.plane_offsets[p]..self.plane_offsets[p] + r * r * ch
    }

    /// Weight (column-major `out × in`) and bias ranges of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (out, inp) = self.config.layer_dims()[l];
        let (w, b) = self.layer_offsets[l];
        (w..w + out * inp, b..b + out)
    }

    pub fn layer_count(&self) -> usize {
        self.layer_offsets.len()
    }

    fn normalized(&self, x: &Vector3<f64>, t: f64) -> ([f64; 4], bool) {
        let mut u = [0.0; 4];
        let mut clamped = false;
        for a in 0..3 {
            let v = (x[a] - self.config.bounds_min[a]) / (self.config.bounds_max[a] - self.config.bounds_min[a]);
            u[a] = v.clamp(0.0, 1.0);
            clamped |= u[a] != v;
        }
        u[3] = t.clamp(0.0, 1.0);
        clamped |= u[3] != t;
        (u, clamped)
    }

    fn corners(&self, u: &[f64; 4]) -> [Corner; 6] {
        let n = self.config.resolution;
        let cell = |v: f64| {
            let g = v * (n - 1) as f64;
            let i = (g.floor() as usize).min(n - 2);
            (i, g - i as f64)
        };
        std::array::from_fn(|p| {
            let (a, b) = PLANE_AXES[p];
            let (i, fi) = cell(u[a]);
            let (j, fj) = cell(u[b]);
            Corner { i, j, fi, fj }
        })
    }

    fn sample(&self, corners: &[Corner; 6], out: &mut [f64]) {
        let n = self.config.resolution;
        let ch = self.config.channels();
        let mut k = 0;
        for p in 0..6 {
            let c = corners[p];
            let base = self.plane_offsets[p];
            let at = |i: usize, j: usize| base + (i * n + j) * ch[p];
            let w = [(1.0 - c.fi) * (1.0 - c.fj), (1.0 - c.fi) * c.fj, c.fi * (1.0 - c.fj), c.fi * c.fj];
            let idx = [at(c.i, c.j), at(c.i, c.j + 1), at(c.i + 1, c.j), at(c.i + 1, c.j + 1)];
            for q in 0..ch[p] {
                out[k + q] = (0..4).map(|m| w[m] * self.params[idx[m] + q]).sum();
            }
            k += ch[p];
        }
    }

    /// Concatenated plane features and whether the query was clamped.
    pub fn features(&self, x: &Vector3<f64>, t: f64) -> (Vec<f64>, bool) {
        let (u, clamped) = self.normalized(x, t);
        let mut f = vec![0.0; self.config.feature_len];
        self.sample(&self.corners(&u), &mut f);
        (f, clamped)
    }

    fn weights(&self, l: usize) -> DMatrixView<'_, f64> {
        let (out, inp) = self.config.layer_dims()[l];
        let (w, _) = self.layer_offsets[l];
        DMatrixView::from_slice(&self.params[w..w + out * inp], out, inp)
    }

    fn bias(&self, l: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.params[self.layer_ranges(l).1])
    }

    /// Forward pass over a batch of points at one time.
    pub fn forward_batch(&self, points: &[Vector3<f64>], t: f64) -> BatchForward {
        let n = points.len();
        let flen = self.config.feature_len;
        let mut feats = DMatrix::zeros(flen, n);
        let mut corners = Vec::with_capacity(n);
        let mut clamped = false;
        for (k, x) in points.iter().enumerate() {
            let (u, c) = self.normalized(x, t);
            clamped |= c;
            let cs = self.corners(&u);
            self.sample(&cs, feats.column_mut(k).as_mut_slice());
            corners.push(cs);
        }
        let mut pre = Vec::new();
        let mut post = vec![feats];
        let layers = self.layer_count();
        for l in 0..layers {
            let mut h = self.weights(l) * post.last().unwrap();
            let b = self.bias(l);
            for mut col in h.column_iter_mut() {
                col += &b;
            }
            if l + 1 < layers {
                let a = h.map(silu);
                pre.push(h);
                post.push(a);
            } else {
                return BatchForward { corners, pre, post, output: h, clamped };
            }
        }
        unreachable!("a field has at least one layer")
    }

    /// Position offsets (first three outputs) for a batch.
    pub fn offsets(&self, points: &[Vector3<f64>], t: f64) -> Vec<Vector3<f64>> {
        let fw = self.forward_batch(points, t);
        (0..points.len()).map(|k| Vector3::new(fw.output[(0, k)], fw.output[(1, k)], fw.output[(2, k)])).collect()
    }

    pub fn offset(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        self.offsets(std::slice::from_ref(x), t)[0]
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutput` (`out_dim × N`).
    pub fn backward(&self, fw: &BatchForward, d_out: &DMatrix<f64>, grad: &mut [f64]) {
        let layers = self.layer_count();
        let mut delta = d_out.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                delta.zip_apply(&fw.pre[l], |d, h| *d *= silu_grad(h));
            }
            let (wr, br) = self.layer_ranges(l);
            let dw = &delta * fw.post[l].transpose();
            for (g, v) in grad[wr].iter_mut().zip(dw.as_slice()) {
                *g += v;
            }
            for (r, g) in grad[br].iter_mut().enumerate() {
                *g += delta.row(r).sum();
            }
            delta = self.weights(l).transpose() * &delta;
        }
        // delta is now dL/dfeatures; scatter through the bilinear weights
        let n = self.config.resolution;
        let ch = self.config.channels();
        for (k, cs) in fw.corners.iter().enumerate() {
            let col = delta.column(k);
            let mut f = 0;
            for p in 0..6 {
                let c = cs[p];
                let base = self.plane_offsets[p];
                let at = |i: usize, j: usize| base + (i * n + j) * ch[p];
                let w = [(1.0 - c.fi) * (1.0 - c.fj), (1.0 - c.fi) * c.fj, c.fi * (1.0 - c.fj), c.fi * c.fj];
                let idx = [at(c.i, c.j), at(c.i, c.j + 1), at(c.i + 1, c.j), at(c.i + 1, c.j + 1)];
                for q in 0..ch[p] {
                    let g = col[f + q];
                    for m in 0..4 {
                        grad[idx[m] + q] += w[m] * g;
                    }
                }
                f += ch[p];
            }
        }
    }

    /// Writes `{stem}.bin` (flat little-endian parameters) and `{stem}.json`.
    /// `f32` is the export format; `f64` preserves training state exactly.
    pub fn save(&self, stem: impl AsRef<Path>, dtype: Dtype) -> Result<(), HexPlaneError> {
        let stem = stem.as_ref();
        let mut bytes = Vec::with_capacity(self.params.len() * dtype.size());
        for v in &self.params {
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
        std::fs::write(stem.with_extension("bin"), bytes)?;
        let meta = CheckpointMeta {
            dtype: dtype.name().into(),
            param_count: self.params.len(),
            plane_axes: PLANE_AXES.iter().map(|&(a, b)| [a, b]).collect(),
            plane_channels: self.config.channels().to_vec(),
            config: self.config.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self, HexPlaneError> {
        let stem = stem.as_ref();
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let dtype = match meta.dtype.as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(HexPlaneError::Dtype(other.into())),
        };
        let mut field = Self::zeros(meta.config)?;
        if meta.param_count != field.params.len() {
            return Err(HexPlaneError::Config(format!("metadata declares {} parameters, configuration implies {}", meta.param_count, field.params.len())));
        }
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let expected = field.params.len() * dtype.size();
        if bytes.len() != expected {
            return Err(HexPlaneError::BlobSize { expected, got: bytes.len() });
        }
        for (v, b) in field.params.iter_mut().zip(bytes.chunks_exact(dtype.size())) {
            *v = match dtype {
                Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            };
        }
        Ok(field)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    dtype: String,
    param_count: usize,
    plane_axes: Vec<[usize; 2]>,
    plane_channels: Vec<usize>,
    config: HexPlaneConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> HexPlaneConfig {
        HexPlaneConfig { resolution: 4, feature_len: 14, hidden: vec![6, 5], bounds_min: [-1.0, -0.5, 0.0], bounds_max: [1.0, 0.5, 2.0], ..Default::default() }
    }

    /// Field with every parameter random, including the head.
    fn random_field(cfg: HexPlaneConfig, seed: u64) -> HexPlaneField {
        let mut f = HexPlaneField::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut f.params {
            *v = rng.random_range(-0.5..0.5);
        }
        f
    }

    #[test]
    fn default_layout() {
        let f = HexPlaneField::new(HexPlaneConfig::default(), 0).unwrap();
        assert_eq!(f.config.channels(), [22, 22, 21, 21, 21, 21]);
        assert_eq!(f.config.channels().iter().sum::<usize>(), 128);
        let grid = 32 * 32 * 128;
        let mlp = 128 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3;
        assert_eq!(f.param_count(), grid + mlp);
    }

    #[test]
    fn fresh_field_predicts_zero() {
        let f = HexPlaneField::new(HexPlaneConfig::default(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            assert_eq!(f.offset(&x, rng.random_range(0.0..1.0)), Vector3::zeros());
        }
    }

    /// Independent scalar bilinear interpolation on plane `p`, channel `c`.
    fn bilinear_oracle(f: &HexPlaneField, p: usize, c: usize, u: f64, v: f64) -> f64 {
        let n = f.config.resolution;
        let ch = f.config.channels()[p];
        let node = |i: usize, j: usize| f.params[f.plane_range(p).start + (i * n + j) * ch + c];
        let (gu, gv) = (u * (n - 1) as f64, v * (n - 1) as f64);
        let (i, j) = ((gu.floor() as usize).min(n - 2), (gv.floor() as usize).min(n - 2));
        let (a, b) = (gu - i as f64, gv - j as f64);
        let top = node(i, j) + b * (node(i, j + 1) - node(i, j));
        let bot = node(i + 1, j) + b * (node(i + 1, j + 1) - node(i + 1, j));
        top + a * (bot - top)
    }

    #[test]
    fn features_match_bilinear_oracle() {
        let f = random_field(small_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..2.0));
            let t = rng.random_range(0.0..1.0);
            let (feat, clamped) = f.features(&x, t);
            assert!(!clamped);
            let u = [(x.x + 1.0) / 2.0, x.y + 0.5, x.z / 2.0, t];
            let mut k = 0;
            for p in 0..6 {
                let (a, b) = PLANE_AXES[p];
                for c in 0..f.config.channels()[p] {
                    assert!((feat[k] - bilinear_oracle(&f, p, c, u[a], u[b])).abs() < 1e-10);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn node_and_constant_and_continuity() {
        let f = random_field(small_config(), 5);
        // node (1, 2, 0) of the xy, xz and yz planes at time node 3
        let x = Vector3::new(-1.0 + 2.0 / 3.0, -0.5 + 2.0 / 3.0, 0.0);
        let (feat, _) = f.features(&x, 1.0);
        let node = |p: usize, i: usize, j: usize, c: usize| f.params[f.plane_range(p).start + (i * 4 + j) * f.config.channels()[p] + c];
        assert!((feat[0] - node(0, 1, 2, 0)).abs() < 1e-12);
        let off = f.config.channels()[0] + f.config.channels()[1] + f.config.channels()[2];
        assert!((feat[off] - node(3, 1, 3, 0)).abs() < 1e-12);

        let mut c = f.clone();
        let grid_end = c.layer_ranges(0).0.start;
        c.params[..grid_end].iter_mut().for_each(|v| *v = 0.37);
        let (feat, _) = c.features(&Vector3::new(0.13, -0.2, 1.7), 0.61);
        assert!(feat.iter().all(|v| (v - 0.37).abs() < 1e-15));

        // cell boundary at x = −1 + 2/3
        let b = -1.0 + 2.0 / 3.0;
        let (lo, _) = f.features(&Vector3::new(b - 1e-7, 0.1, 0.3), 0.4);
        let (hi, _) = f.features(&Vector3::new(b + 1e-7, 0.1, 0.3), 0.4);
        assert!(lo.iter().zip(&hi).all(|(a, b)| (a - b).abs() < 1e-5));

        let (_, clamped) = f.features(&Vector3::new(5.0, 0.0, 0.0), 0.5);
        assert!(clamped);
    }

    #[test]
    fn one_layer_head_is_affine() {
        let cfg = HexPlaneConfig { hidden: vec![], ..small_config() };
        let mut f = HexPlaneField::zeros(cfg).unwrap();
        let grid_end = f.layer_ranges(0).0.start;
        f.params[..grid_end].iter_mut().for_each(|v| *v = 0.5);
        let (wr, br) = f.layer_ranges(0);
        // column-major 3 × 14: W[r, c] = r + 1 for every column
        for (k, v) in f.params[wr].iter_mut().enumerate() {
            *v = (k % 3 + 1) as f64;
        }
        f.params[br].copy_from_slice(&[0.1, 0.2, 0.3]);
        let d = f.offset(&Vector3::new(0.3, 0.1, 1.0), 0.2);
        // features are all 0.5, so Δ_r = 14·0.5·(r+1) + b_r
        assert!((d - Vector3::new(7.1, 14.2, 21.3)).norm() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = random_field(small_config(), 9);
        let pts = vec![Vector3::new(0.2, 0.1, 0.7), Vector3::new(-0.6, -0.3, 1.9), Vector3::new(0.9, 0.45, 0.05)];
        let t = 0.35;
        let loss = |f: &HexPlaneField| f.offsets(&pts, t).iter().map(|d| d.norm_squared()).sum::<f64>();
        let fw = f.forward_batch(&pts, t);
        let d_out = 2.0 * &fw.output;
        let mut grad = vec![0.0; f.param_count()];
        f.backward(&fw, &d_out, &mut grad);
        let h = 1e-4;
        let mut touched = 0;
        for k in 0..f.param_count() {
            let mut p = f.clone();
            p.params[k] += h;
            let mut m = f.clone();
            m.params[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(err < 1e-3 || (fd - grad[k]).abs() < 1e-9, "param {k}: fd {fd} analytic {}", grad[k]);
            touched += usize::from(grad[k] != 0.0);
        }
        assert!(touched > 100);
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = HexPlaneField::new(small_config(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("field");
        f.save(&stem, Dtype::F64).unwrap();
        assert_eq!(HexPlaneField::load(&stem).unwrap(), f);
        f.save(&stem, Dtype::F32).unwrap();
        let g = HexPlaneField::load(&stem).unwrap();
        assert!(f.params.iter().zip(&g.params).all(|(a, b)| (a - b).abs() < 1e-7));
        std::fs::write(stem.with_extension("bin"), [0u8; 3]).unwrap();
        assert!(matches!(HexPlaneField::load(&stem), Err(HexPlaneError::BlobSize { .. })));
    }
}
