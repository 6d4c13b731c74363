//! Stage configuration: JSON on disk, `key=value` overrides on the command
//! line, and seeded sampling helpers shared by both stages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::OptError;
use crate::gauss::Camera;
use crate::guidance::JointWeights;
use crate::hexplane::HexPlaneConfig;
use crate::math::{self, Quat};
use crate::motion::CorrespondenceConfig;
use nalgebra::Vector3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Compose,
    Animate,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Compose => "compose",
            Stage::Animate => "animate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub rotation: f64,
    pub translation: f64,
    pub scale: f64,
    pub hexplane: f64,
    /// Band-0 color refinement (only with `optimize_colors`).
    pub color: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ca: f64,
    pub sds: f64,
    pub ssds: f64,
    /// Temporal smoothness of per-frame residuals.
    pub smooth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSampling {
    pub radius: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub fov: f64,
    pub target: [f64; 3],
}

/// Render resolution `sizes[i]` from step `milestones[i-1]` on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSchedule {
    pub sizes: Vec<usize>,
    pub milestones: Vec<usize>,
}

impl ResolutionSchedule {
    pub fn at(&self, step: usize) -> usize {
        let idx = self.milestones.iter().take_while(|&&m| step >= m).count();
        self.sizes[idx.min(self.sizes.len() - 1)]
    }

    fn validate(&self) -> Result<(), OptError> {
        if self.sizes.is_empty() || self.milestones.len() + 1 != self.sizes.len() {
            return Err(OptError::Config(format!("resolution schedule needs one more size than milestones, got {:?} / {:?}", self.sizes, self.milestones)));
        }
        if self.sizes.contains(&0) || self.sizes.windows(2).any(|w| w[0] > w[1]) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OptError::Config(format!("resolution schedule must be positive and monotone, got {:?} at {:?}", self.sizes, self.milestones)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Compose: `R ~ N(mean, std)` per component, then normalized.
    pub rotation_mean: Quat,
    pub rotation_std: f64,
    /// Compose: `S ~ N(mean, std)`, clamped below by `scale_floor`.
    pub scale_mean: f64,
    pub scale_std: f64,
    pub scale_floor: f64,
    /// Animate: residual rotation before normalization.
    pub residual_rotation: Quat,
    /// Animate: start the residual at the identity instead.
    pub identity_residual: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full method.
    None,
    /// Residual frozen at the identity and no correspondence loss.
    WithoutResidualAndCa,
    /// Residual trained by the diffusion losses only.
    WithoutCa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScope {
    /// One residual for the whole sequence.
    Shared,
    /// One residual per frame, tied by the smoothness loss.
    PerFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub guidance_scale: f64,
    /// Timestep fractions for the spatial-aware SDS.
    pub ssds_t_range: (f64, f64),
    /// Timestep fractions for the joint rgb/depth SDS.
    pub sds_t_range: (f64, f64),
    /// Attention scale `c` applied to each interaction token.
    pub token_scale: f64,
    pub joint: JointWeights,
    /// Half-extent of the normalized depth range around the orbit radius.
    pub depth_extent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub lambda: LossWeights,
    pub camera: CameraSampling,
    pub resolution: ResolutionSchedule,
    pub init: InitConfig,
    pub guidance: GuidanceConfig,
    pub correspondence: CorrespondenceConfig,
    pub hexplane: HexPlaneConfig,
    pub ablation: Ablation,
    pub residual_scope: ResidualScope,
    pub optimize_colors: bool,
    pub train_hexplane: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub preview_every: usize,
    pub preview_size: usize,
    /// Abort when the translation norm exceeds this many scene units.
    pub divergence_limit: f64,
}

impl StageConfig {
    pub fn compose() -> Self {
        Self {
            stage: Stage::Compose,
            epochs: 400,
            batch_size: 16,
            lr: LearningRates { rotation: 0.005, translation: 0.005, scale: 0.005, hexplane: 0.0016, color: 0.0025 },
            lambda: LossWeights { ca: 1e3, sds: 1.0, ssds: 1.0, smooth: 0.0 },
            camera: CameraSampling { radius: 2.0, elevation_min: -30.0, elevation_max: 30.0, fov: 49.1, target: [0.0; 3] },
            resolution: ResolutionSchedule { sizes: vec![128, 256, 512], milestones: vec![120, 240] },
            init: InitConfig {
                rotation_mean: [0.5; 4],
                rotation_std: 0.1,
                scale_mean: 1.0,
                scale_std: 0.3,
                scale_floor: 0.1,
                residual_rotation: [-0.16, -0.16, -0.16, 0.5],
                identity_residual: false,
            },
            guidance: GuidanceConfig {
                guidance_scale: 7.5,
                ssds_t_range: (0.01, 0.97),
                sds_t_range: (0.02, 0.98),
                token_scale: 2.0,
                joint: JointWeights { rgb: 1.0, depth: 1.0, clip: 1.0 },
                depth_extent: 1.0,
            },
            correspondence: CorrespondenceConfig::default(),
            hexplane: HexPlaneConfig::default(),
            ablation: Ablation::None,
            residual_scope: ResidualScope::Shared,
            optimize_colors: false,
            train_hexplane: true,
            seed: 0,
            checkpoint_every: 50,
            preview_every: 50,
            preview_size: 128,
            divergence_limit: 10.0,
        }
    }

    pub fn animate() -> Self {
        let mut c = Self::compose();
        c.stage = Stage::Animate;
        c.batch_size = 10;
        c.lr.rotation = 0.001;
        c.lr.translation = 0.001;
        c.lambda.smooth = 10.0;
        c
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Compose => Self::compose(),
            Stage::Animate => Self::animate(),
        }
    }

    pub fn validate(&self) -> Result<(), OptError> {
        if self.epochs == 0 {
            return Err(OptError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(OptError::Config("batch size must be positive".into()));
        }
        self.resolution.validate()?;
        let lrs = [self.lr.rotation, self.lr.translation, self.lr.scale, self.lr.hexplane, self.lr.color];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(OptError::Config(format!("learning rates must be finite and ≥ 0, got {lrs:?}")));
        }
        let l = &self.lambda;
        if [l.ca, l.sds, l.ssds, l.smooth].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(OptError::Config("loss weights must be finite and ≥ 0".into()));
        }
        let c = &self.camera;
        if !(c.radius > 0.0 && c.elevation_min <= c.elevation_max && c.fov > 0.0 && c.fov < 180.0) {
            return Err(OptError::Config("camera sampling needs radius > 0, ordered elevations and fov in (0, 180)".into()));
        }
        for (name, (lo, hi)) in [("ssds_t_range", self.guidance.ssds_t_range), ("sds_t_range", self.guidance.sds_t_range)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(OptError::Config(format!("{name} must satisfy 0 ≤ lo ≤ hi ≤ 1, got ({lo}, {hi})")));
            }
        }
        if !(self.guidance.token_scale >= 1.0) {
            return Err(OptError::Config(format!("token scale must be ≥ 1, got {}", self.guidance.token_scale)));
        }
        if !(self.init.scale_floor > 0.0) {
            return Err(OptError::Config("scale floor must be positive".into()));
        }
        if math::quat_norm(&self.init.residual_rotation) == 0.0 {
            return Err(OptError::Config("residual rotation init must be nonzero".into()));
        }
        if self.checkpoint_every == 0 || self.preview_every == 0 || self.preview_size == 0 {
            return Err(OptError::Config("checkpoint/preview cadence and preview size must be positive".into()));
        }
        self.hexplane.validate().map_err(|e| OptError::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides addressed by dotted field path, e.g.
    /// `lr.rotation=0.01` or `resolution.sizes=[64,128]`. Values parse as
    /// JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, OptError> {
        let mut root = serde_json::to_value(self).map_err(|e| OptError::Config(e.to_string()))?;
        for kv in overrides {
            let (key, raw) = kv.split_once('=').ok_or_else(|| OptError::Config(format!("override `{kv}` is not key=value")))?;
            let value: serde_json::Value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut root;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| OptError::Config(format!("unknown config key `{key}`")))?;
            }
            *node = value;
        }
        let out: Self = serde_json::from_value(root).map_err(|e| OptError::Config(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, OptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| OptError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| OptError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Deterministic generator for one step: depends only on the seed, a
    /// purpose tag and the step index, so a resumed run draws the same
    /// samples.
    pub fn step_rng(&self, tag: u64, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64);
        rng
    }

    pub fn sample_camera(&self, rng: &mut impl Rng, size: usize) -> Camera {
        let c = &self.camera;
        let elevation = if c.elevation_max > c.elevation_min { rng.random_range(c.elevation_min..c.elevation_max) } else { c.elevation_min };
        let azimuth = rng.random_range(0.0..360.0);
        Camera::orbit(Vector3::from(c.target), c.radius, elevation, azimuth, c.fov, size, size)
    }

    /// Timestep drawn uniformly from the fractional range.
    pub fn sample_timestep(rng: &mut impl Rng, range: (usize, usize)) -> usize {
        rng.random_range(range.0..=range.1)
    }

    pub fn token_scales(&self, tokens: &[String]) -> BTreeMap<String, f64> {
        tokens.iter().map(|t| (t.clone(), self.guidance.token_scale)).collect()
    }
}
