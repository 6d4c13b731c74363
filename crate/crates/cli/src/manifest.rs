//! Scene manifests: asset paths, prompts and providers, validated up front.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use duet_core::body::{MotionSequence, SkinnedBody};
use duet_core::contact::{HttpSegmenter, MockMask, MockSegmenter, Segmenter};
use duet_core::gauss::ply::load_ply;
use duet_core::gauss::GaussianCloud;
use duet_core::guidance::{AttractorProvider, AttractorTarget, EchoProvider, GuidanceProvider, HttpProvider, NoiseSchedule, TokenProvider};
use duet_core::opt::{Stage, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Overrides every HTTP provider endpoint in the manifest.
pub const SIDECAR_URL_ENV: &str = "DUET_SIDECAR_URL";

/// Scene description. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub human: PathBuf,
    pub object: PathBuf,
    /// Skinned body asset (JSON).
    pub body: PathBuf,
    /// Motion clip (JSON).
    pub motion: PathBuf,
    /// Scene text prompt.
    pub prompt: String,
    /// Tokens of the prompt whose attention is scaled by SSDS.
    pub interaction_tokens: Vec<String>,
    /// Contact body-part prompt for segmentation.
    pub body_part: String,
    pub providers: ProviderSpecs,
    #[serde(default)]
    pub mocks: MockSettings,
    #[serde(default)]
    pub contact: ContactSettings,
    #[serde(default)]
    pub compose_config: Option<PathBuf>,
    #[serde(default)]
    pub animate_config: Option<PathBuf>,
    /// Base URL used by providers given as `sidecar`.
    #[serde(default)]
    pub sidecar_url: Option<String>,
    pub output: PathBuf,
}

/// Each provider is `mock:<kind>`, `sidecar`, or an `http(s)://` base URL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpecs {
    /// `mock:disk`, `mock:half_plane`, `mock:zeros` or `mock:fixture`.
    pub segmentation: String,
    /// Spatial-aware SDS during composition: `mock:echo`, `mock:attractor`
    /// or `mock:tokens`.
    pub guidance: String,
    /// Joint rgb/depth SDS during animation; defaults to `guidance`.
    #[serde(default)]
    pub joint_guidance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockSettings {
    /// Parameters of the mock segmentation mask.
    pub mask: Option<MockMask>,
    /// Constant the attractor pulls every latent value toward.
    pub attractor_value: f64,
    pub attractor_blur: f64,
    /// Per-token coefficients of the token mock; interaction tokens missing
    /// here get `default_token_coefficient`.
    pub token_coefficients: BTreeMap<String, f64>,
    pub default_token_coefficient: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self { mask: None, attractor_value: 0.5, attractor_blur: 0.0, token_coefficients: BTreeMap::new(), default_token_coefficient: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactSettings {
    /// Label threshold on back-projected weights.
    pub threshold: f64,
    /// Weight the centroid by the back-projected weights.
    pub soft: bool,
}

impl Default for ContactSettings {
    fn default() -> Self {
        Self { threshold: duet_core::contact::DEFAULT_THRESHOLD, soft: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmenterSpec {
    Mock(MockMask),
    Http(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceSpec {
    Echo,
    Attractor,
    Tokens,
    Http(String),
}

/// A validated manifest with every asset loaded.
pub struct Scene {
    pub manifest: SceneManifest,
    pub human: GaussianCloud,
    pub object: GaussianCloud,
    pub body: SkinnedBody,
    pub motion: MotionSequence,
    pub output: PathBuf,
    pub segmenter: SegmenterSpec,
    pub guidance: GuidanceSpec,
    pub joint_guidance: GuidanceSpec,
    compose_config: Option<PathBuf>,
    animate_config: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn http_url(spec: &str, manifest_url: Option<&str>, env_url: Option<&str>) -> Result<Option<String>, CliError> {
    if spec == "sidecar" {
        return env_url
            .or(manifest_url)
            .map(|u| Some(u.to_string()))
            .ok_or_else(|| CliError::Validation(format!("provider `sidecar` needs `sidecar_url` in the manifest or {SIDECAR_URL_ENV}")));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Some(env_url.unwrap_or(spec).to_string()));
    }
    Ok(None)
}

impl SceneManifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("manifest: {e}")))
    }

    fn segmenter(&self, base: &Path, env_url: Option<&str>) -> Result<SegmenterSpec, CliError> {
        let spec = self.providers.segmentation.as_str();
        if let Some(url) = http_url(spec, self.sidecar_url.as_deref(), env_url)? {
            return Ok(SegmenterSpec::Http(url));
        }
        let kind = spec.strip_prefix("mock:").ok_or_else(|| CliError::Validation(format!("unknown segmentation provider `{spec}`")))?;
        let mask = match (kind, &self.mocks.mask) {
            ("zeros", None) => MockMask::Zeros,
            (_, None) => return Err(CliError::Validation(format!("segmentation `{spec}` needs `mocks.mask` parameters"))),
            (_, Some(m)) => m.clone(),
        };
        let declared = match &mask {
            MockMask::Disk { .. } => "disk",
            MockMask::HalfPlane { .. } => "half_plane",
            MockMask::Zeros => "zeros",
            MockMask::Fixture { .. } => "fixture",
        };
        if declared != kind {
            return Err(CliError::Validation(format!("segmentation `{spec}` does not match `mocks.mask` of kind `{declared}`")));
        }
        Ok(SegmenterSpec::Mock(match mask {
            MockMask::Fixture { path } => {
                let path = resolve(base, &path);
                if !path.is_file() {
                    return Err(CliError::Validation(format!("mask fixture {} does not exist", path.display())));
                }
                MockMask::Fixture { path }
            }
            m => m,
        }))
    }

    fn guidance(&self, spec: &str, env_url: Option<&str>) -> Result<GuidanceSpec, CliError> {
        if let Some(url) = http_url(spec, self.sidecar_url.as_deref(), env_url)? {
            return Ok(GuidanceSpec::Http(url));
        }
        match spec {
            "mock:echo" => Ok(GuidanceSpec::Echo),
            "mock:attractor" => Ok(GuidanceSpec::Attractor),
            "mock:tokens" => Ok(GuidanceSpec::Tokens),
            _ => Err(CliError::Validation(format!("unknown guidance provider `{spec}`"))),
        }
    }
}

impl Scene {
    /// Reads the manifest and every asset it names. Nothing is written.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
        let manifest = SceneManifest::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let env_url = std::env::var(SIDECAR_URL_ENV).ok().filter(|u| !u.is_empty());
        Self::from_manifest(manifest, &base, env_url.as_deref())
    }

    pub fn from_manifest(manifest: SceneManifest, base: &Path, env_url: Option<&str>) -> Result<Self, CliError> {
        let file = |p: &Path, what: &str| -> Result<PathBuf, CliError> {
            let full = resolve(base, p);
            if full.is_file() {
                Ok(full)
            } else {
                Err(CliError::Validation(format!("{what} file {} does not exist", full.display())))
            }
        };
        let human_path = file(&manifest.human, "human PLY")?;
        let object_path = file(&manifest.object, "object PLY")?;
        let body_path = file(&manifest.body, "body")?;
        let motion_path = file(&manifest.motion, "motion")?;
        let compose_config = manifest.compose_config.as_ref().map(|p| file(p, "compose config")).transpose()?;
        let animate_config = manifest.animate_config.as_ref().map(|p| file(p, "animate config")).transpose()?;
        if manifest.prompt.trim().is_empty() || manifest.body_part.trim().is_empty() {
            return Err(CliError::Validation("prompt and body_part must be non-empty".into()));
        }
        for t in &manifest.interaction_tokens {
            if !manifest.prompt.split_whitespace().any(|w| w == t) {
                log::warn!("interaction token \"{t}\" does not occur in the prompt");
            }
        }
        if !(manifest.contact.threshold.is_finite() && manifest.contact.threshold >= 0.0) {
            return Err(CliError::Validation(format!("contact threshold must be finite and ≥ 0, got {}", manifest.contact.threshold)));
        }

        let segmenter = manifest.segmenter(base, env_url)?;
        let guidance = manifest.guidance(&manifest.providers.guidance, env_url)?;
        let joint_guidance = manifest.guidance(manifest.providers.joint_guidance.as_deref().unwrap_or(&manifest.providers.guidance), env_url)?;

        let load_cloud = |p: &Path| -> Result<GaussianCloud, CliError> {
            let c = load_ply(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            c.validate().map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            if c.is_empty() {
                return Err(CliError::Validation(format!("{} holds no gaussians", p.display())));
            }
            Ok(c)
        };
        let human = load_cloud(&human_path)?;
        let object = load_cloud(&object_path)?;
        let body = SkinnedBody::load(&body_path).map_err(|e| CliError::Validation(format!("{}: {e}", body_path.display())))?;
        let motion = MotionSequence::load(&motion_path).map_err(|e| CliError::Validation(format!("{}: {e}", motion_path.display())))?;
        motion.validate_for(&body).map_err(|e| CliError::Validation(format!("{}: {e}", motion_path.display())))?;
        if motion.is_empty() {
            return Err(CliError::Validation(format!("{} has no frames", motion_path.display())));
        }

        let output = resolve(base, &manifest.output);
        let scene = Self { manifest, human, object, body, motion, output, segmenter, guidance, joint_guidance, compose_config, animate_config };
        // both stage configs must parse before anything runs
        scene.stage_config(Stage::Compose, None, &[])?;
        scene.stage_config(Stage::Animate, None, &[])?;
        Ok(scene)
    }

    /// Stage defaults, then the manifest's config file, then `--seed`, then
    /// `--set` overrides.
    pub fn stage_config(&self, stage: Stage, seed: Option<u64>, overrides: &[String]) -> Result<StageConfig, CliError> {
        let path = match stage {
            Stage::Compose => &self.compose_config,
            Stage::Animate => &self.animate_config,
        };
        let mut cfg = match path {
            Some(p) => StageConfig::load(p)?,
            None => StageConfig::for_stage(stage),
        };
        if cfg.stage != stage {
            return Err(CliError::Validation(format!("config for the {} stage declares stage {}", stage.name(), cfg.stage.name())));
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let cfg = cfg.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_segmenter(&self) -> Box<dyn Segmenter> {
        match &self.segmenter {
            SegmenterSpec::Mock(m) => Box::new(MockSegmenter(m.clone())),
            SegmenterSpec::Http(url) => Box::new(HttpSegmenter::new(url)),
        }
    }

    pub fn build_guidance(&self, spec: &GuidanceSpec) -> Box<dyn GuidanceProvider> {
        let mocks = &self.manifest.mocks;
        match spec {
            GuidanceSpec::Echo => Box::new(EchoProvider),
            GuidanceSpec::Attractor => Box::new(AttractorProvider {
                target: AttractorTarget::Constant(mocks.attractor_value),
                schedule: NoiseSchedule::default(),
                blur_sigma: mocks.attractor_blur,
            }),
            GuidanceSpec::Tokens => {
                let mut coefficients = mocks.token_coefficients.clone();
                for t in &self.manifest.interaction_tokens {
                    coefficients.entry(t.clone()).or_insert(mocks.default_token_coefficient);
                }
                Box::new(TokenProvider { coefficients })
            }
            GuidanceSpec::Http(url) => Box::new(HttpProvider::new(url)),
        }
    }
}
