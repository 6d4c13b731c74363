//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use duet_core::assets;
use duet_core::contact::{frontal_camera, overlay, retarget, MockMask};
use duet_core::gauss::ply::save_ply;
use duet_core::gauss::{Camera, GaussianCloud};
use duet_core::hexplane::HexPlaneField;
use duet_core::motion::ResidualTransform;
use duet_core::opt::log::{latest_checkpoint, load_checkpoint, read_metrics, stage_dir, CheckpointState};
use duet_core::opt::{
    evaluate_frames, posed_clouds, run_animate_stage, run_compose_stage, AnimateScene, ComposeInputs, FrameMetrics, MetricRecord, Providers, RunOptions, Stage, StageConfig,
};
use duet_core::render::{rasterize, write_png_depth16, write_png_rgb, RenderSettings};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{ContactSettings, MockSettings, ProviderSpecs, Scene, SceneManifest};

/// Settings shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Runtime {
    pub settings: RenderSettings,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

/// Stage execution flags.
#[derive(Clone, Debug, Default)]
pub struct StageRun {
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Where render and eval take the scene from.
#[derive(Clone, Debug, Default)]
pub struct Source {
    /// A specific checkpoint directory of either stage.
    pub checkpoint: Option<PathBuf>,
    /// Ignore animation checkpoints: the object keeps the identity residual.
    pub canonical: bool,
    /// Use the manifest object as already placed instead of a compose
    /// checkpoint.
    pub placed_object: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path.display(), e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path.display(), e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path.display(), e))
}

/// Frontal segmentation camera aimed at the center of the human's bounds.
pub fn contact_camera(human: &GaussianCloud) -> Camera {
    let (lo, hi) = human.bounds().unwrap_or((Vector3::zeros(), Vector3::zeros()));
    frontal_camera(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub prompt: String,
    pub threshold: f64,
    pub soft: bool,
    pub labeled: usize,
    pub total: usize,
    pub t_init: [f64; 3],
    /// Indices of the labeled human gaussians.
    pub labels: Vec<usize>,
}

pub fn contact_report_path(out: &Path) -> PathBuf {
    out.join("contact").join("contact.json")
}

pub fn cmd_contact(scene: &Scene, rt: &Runtime) -> Result<ContactReport, CliError> {
    let camera = contact_camera(&scene.human);
    let segmenter = scene.build_segmenter();
    let ContactSettings { threshold, soft } = scene.manifest.contact.clone();
    let prompt = &scene.manifest.body_part;
    let (labels, render, mask) = retarget(&scene.human, prompt, segmenter.as_ref(), &camera, &rt.settings, threshold, soft)?;
    let report = ContactReport {
        prompt: prompt.clone(),
        threshold,
        soft,
        labeled: labels.count(),
        total: labels.labels.len(),
        t_init: labels.t_init,
        labels: labels.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect(),
    };
    let dir = scene.output.join("contact");
    create_dir(&dir)?;
    write_png_rgb(dir.join("render.png"), &render)?;
    write_png_rgb(dir.join("mask.png"), &mask.to_image())?;
    write_png_rgb(dir.join("overlay.png"), &overlay(&render, &mask))?;
    write_json(&contact_report_path(&scene.output), &report)?;
    Ok(report)
}

/// First and last logged losses of a stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: usize,
    pub complete: bool,
    pub first: BTreeMap<String, f64>,
    pub last: BTreeMap<String, f64>,
}

fn summarize(stage: Stage, steps: usize, cfg: &StageConfig, metrics: &[MetricRecord]) -> Result<StageSummary, CliError> {
    if let Some(bad) = metrics.iter().find(|r| !r.all_finite()) {
        return Err(CliError::Numeric(format!("{} step {} logged a non-finite value: {}", stage.name(), bad.step, serde_json::to_string(bad).unwrap_or_default())));
    }
    Ok(StageSummary {
        stage,
        steps,
        complete: steps == cfg.epochs,
        first: metrics.first().map(|r| r.losses.clone()).unwrap_or_default(),
        last: metrics.last().map(|r| r.losses.clone()).unwrap_or_default(),
    })
}

pub fn cmd_compose(scene: &Scene, rt: &Runtime, run: &StageRun, skip_contact: bool) -> Result<StageSummary, CliError> {
    let cfg = scene.stage_config(Stage::Compose, rt.seed, &rt.overrides)?;
    let anchor = if skip_contact {
        Vector3::zeros()
    } else {
        let path = contact_report_path(&scene.output);
        let text = fs::read_to_string(&path).map_err(|_| CliError::Validation(format!("{} is missing: run `duet contact` first or pass --skip-contact", path.display())))?;
        let report: ContactReport = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Vector3::from(report.t_init)
    };
    let ssds = scene.build_guidance(&scene.guidance);
    let sds = scene.build_guidance(&scene.joint_guidance);
    create_dir(&scene.output)?;
    let inputs = ComposeInputs {
        human: &scene.human,
        object: &scene.object,
        anchor,
        prompt: &scene.manifest.prompt,
        interaction_tokens: &scene.manifest.interaction_tokens,
        settings: &rt.settings,
    };
    let opts = RunOptions { out_dir: Some(scene.output.clone()), resume: run.resume, stop_after: run.stop_after };
    let r = run_compose_stage(&inputs, &cfg, Providers { ssds: ssds.as_ref(), sds: sds.as_ref() }, &opts)?;
    let all = read_metrics(stage_dir(&scene.output, Stage::Compose).join("metrics.ndjson"))?;
    let summary = summarize(Stage::Compose, r.steps, &cfg, &all)?;
    if summary.complete {
        let dir = stage_dir(&scene.output, Stage::Compose).join("final");
        create_dir(&dir)?;
        save_ply(&r.human, dir.join("human.ply"))?;
        save_ply(&r.object, dir.join("object.ply"))?;
        write_json(&dir.join("placement.json"), &r.placement)?;
    }
    Ok(summary)
}

/// The composed pair in canonical space.
pub struct Composed {
    pub human: GaussianCloud,
    pub object: GaussianCloud,
    pub checkpoint: Option<PathBuf>,
}

fn set_dc(cloud: &mut GaussianCloud, dc: &[f64]) {
    for i in 0..cloud.len() {
        cloud.sh_of_mut(i)[..3].copy_from_slice(&dc[3 * i..3 * i + 3]);
    }
}

fn checkpoint_state(dir: &Path) -> Result<CheckpointState, CliError> {
    let st = load_checkpoint(dir)?;
    if st.step < st.config.epochs {
        log::warn!("{} is a partial {} run ({} of {} steps)", dir.display(), st.stage.name(), st.step, st.config.epochs);
    }
    Ok(st)
}

fn composed_from(scene: &Scene, dir: &Path, st: &CheckpointState) -> Result<Composed, CliError> {
    let placement = st.placement.clone().ok_or_else(|| CliError::Validation(format!("{} holds no placement", dir.display())))?;
    let mut human = scene.human.clone();
    let mut object = scene.object.clone();
    if let Some(dc) = &st.colors {
        let nh = 3 * human.len();
        if dc.len() != nh + 3 * object.len() {
            return Err(CliError::Validation(format!("{} holds colors for a different scene", dir.display())));
        }
        set_dc(&mut human, &dc[..nh]);
        set_dc(&mut object, &dc[nh..]);
    }
    let object = placement.apply(&object)?;
    Ok(Composed { human, object, checkpoint: Some(dir.to_path_buf()) })
}

pub fn load_composed(scene: &Scene, src: &Source) -> Result<Composed, CliError> {
    if src.placed_object {
        return Ok(Composed { human: scene.human.clone(), object: scene.object.clone(), checkpoint: None });
    }
    if let Some(dir) = &src.checkpoint {
        let st = checkpoint_state(dir)?;
        if st.stage == Stage::Compose {
            return composed_from(scene, dir, &st);
        }
    }
    let dir = latest_checkpoint(&scene.output, Stage::Compose)
        .ok_or_else(|| CliError::Validation(format!("no compose checkpoint under {}: run `duet compose` first or pass --placed-object", scene.output.display())))?;
    let st = checkpoint_state(&dir)?;
    composed_from(scene, &dir, &st)
}

/// Trained residuals and deformation field.
pub struct Animation {
    pub residuals: Vec<ResidualTransform>,
    pub field: HexPlaneField,
    pub checkpoint: PathBuf,
}

pub fn load_animation(scene: &Scene, src: &Source) -> Result<Option<Animation>, CliError> {
    if src.canonical {
        return Ok(None);
    }
    let dir = match &src.checkpoint {
        Some(d) => d.clone(),
        None => match latest_checkpoint(&scene.output, Stage::Animate) {
            Some(d) => d,
            None => return Ok(None),
        },
    };
    let st = checkpoint_state(&dir)?;
    if st.stage != Stage::Animate {
        return Ok(None);
    }
    let field = HexPlaneField::load(dir.join("hexplane"))?;
    Ok(Some(Animation { residuals: st.residuals, field, checkpoint: dir }))
}

pub fn cmd_animate(scene: &Scene, rt: &Runtime, run: &StageRun, placed_object: bool) -> Result<StageSummary, CliError> {
    let cfg = scene.stage_config(Stage::Animate, rt.seed, &rt.overrides)?;
    let composed = load_composed(scene, &Source { placed_object, ..Default::default() })?;
    let ssds = scene.build_guidance(&scene.guidance);
    let sds = scene.build_guidance(&scene.joint_guidance);
    let anim = AnimateScene {
        body: &scene.body,
        human: &composed.human,
        object: &composed.object,
        motion: &scene.motion,
        prompt: &scene.manifest.prompt,
        interaction_tokens: &scene.manifest.interaction_tokens,
        settings: &rt.settings,
    };
    let opts = RunOptions { out_dir: Some(scene.output.clone()), resume: run.resume, stop_after: run.stop_after };
    let r = run_animate_stage(&anim, &cfg, Providers { ssds: ssds.as_ref(), sds: sds.as_ref() }, &opts)?;
    let all = read_metrics(stage_dir(&scene.output, Stage::Animate).join("metrics.ndjson"))?;
    let summary = summarize(Stage::Animate, r.steps, &cfg, &all)?;
    if summary.complete {
        let dir = stage_dir(&scene.output, Stage::Animate).join("final");
        create_dir(&dir)?;
        write_json(&dir.join("animation.json"), &animation_manifest(scene, &r.residuals, None))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationFrame {
    pub frame: usize,
    /// Normalized time in [0, 1].
    pub time: f64,
    pub residual: ResidualTransform,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ply: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationManifest {
    pub fps: f64,
    pub frames: Vec<AnimationFrame>,
}

fn animation_manifest(scene: &Scene, residuals: &[ResidualTransform], frames: Option<&[usize]>) -> AnimationManifest {
    let all: Vec<usize> = (0..scene.motion.len()).collect();
    let frames = frames.unwrap_or(&all);
    AnimationManifest {
        fps: scene.motion.fps,
        frames: frames
            .iter()
            .map(|&f| AnimationFrame {
                frame: f,
                time: scene.motion.time_of(f),
                residual: if residuals.len() == 1 { residuals[0].clone() } else { residuals[f].clone() },
                ply: None,
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_penetration: f64,
    pub max_penetration: f64,
    pub mean_l_ca: f64,
    pub max_rigidity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Compose checkpoint relative to the output directory, or null for a
    /// pre-placed object.
    pub compose: Option<PathBuf>,
    /// Animate checkpoint relative to the output directory, or null for the
    /// identity residual.
    pub animate: Option<PathBuf>,
    pub frames: Vec<FrameMetrics>,
    pub summary: EvalSummary,
}

pub fn cmd_eval(scene: &Scene, rt: &Runtime, src: &Source) -> Result<EvalReport, CliError> {
    let cfg = scene.stage_config(Stage::Animate, rt.seed, &rt.overrides)?;
    let composed = load_composed(scene, src)?;
    let animation = load_animation(scene, src)?;
    let residuals = animation.as_ref().map(|a| a.residuals.clone()).unwrap_or_else(|| vec![ResidualTransform::identity()]);
    let anim = AnimateScene {
        body: &scene.body,
        human: &composed.human,
        object: &composed.object,
        motion: &scene.motion,
        prompt: &scene.manifest.prompt,
        interaction_tokens: &scene.manifest.interaction_tokens,
        settings: &rt.settings,
    };
    let frames = evaluate_frames(&anim, &residuals, &cfg)?;
    if let Some(f) = frames.iter().find(|f| ![f.penetration, f.l_ca, f.l_ca_hard, f.rigidity].iter().all(|v| v.is_finite())) {
        return Err(CliError::Numeric(format!("non-finite metrics at frame {}: {f:?}", f.frame)));
    }
    let n = frames.len() as f64;
    let summary = EvalSummary {
        mean_penetration: frames.iter().map(|f| f.penetration).sum::<f64>() / n,
        max_penetration: frames.iter().map(|f| f.penetration).fold(0.0, f64::max),
        mean_l_ca: frames.iter().map(|f| f.l_ca).sum::<f64>() / n,
        max_rigidity: frames.iter().map(|f| f.rigidity).fold(0.0, f64::max),
    };
    let rel = |p: PathBuf| p.strip_prefix(&scene.output).map(Path::to_path_buf).unwrap_or(p);
    let report = EvalReport { compose: composed.checkpoint.map(rel), animate: animation.map(|a| rel(a.checkpoint)), frames, summary };
    let dir = scene.output.join("eval");
    create_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Camera layout of a render.
#[derive(Clone, Debug)]
pub struct RenderSpec {
    /// Views evenly spaced in azimuth; overrides `azimuth`.
    pub turntable: Option<usize>,
    pub azimuth: f64,
    pub elevation: f64,
    /// Defaults to the compose camera radius.
    pub radius: Option<f64>,
    pub size: usize,
    /// Motion frames to pose; empty renders the static canonical composite.
    pub frames: Vec<usize>,
    /// Also export each frame's composite as PLY plus an animation manifest.
    pub ply: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub frame: Option<usize>,
    pub view: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub rgb: PathBuf,
    pub alpha: PathBuf,
    pub depth: PathBuf,
}

pub fn render_dir(out: &Path) -> PathBuf {
    out.join("render")
}

pub fn cmd_render(scene: &Scene, rt: &Runtime, src: &Source, spec: &RenderSpec) -> Result<Vec<RenderedView>, CliError> {
    let cfg = scene.stage_config(Stage::Compose, rt.seed, &rt.overrides)?;
    if spec.size == 0 || spec.turntable == Some(0) {
        return Err(CliError::Validation("render size and turntable view count must be positive".into()));
    }
    let composed = load_composed(scene, src)?;
    let mut clouds: Vec<(Option<usize>, GaussianCloud)> = Vec::new();
    let mut residuals = vec![ResidualTransform::identity()];
    if spec.frames.is_empty() {
        let mut c = composed.human.clone();
        c.extend_from(&composed.object)?;
        clouds.push((None, c));
    } else {
        let animation = load_animation(scene, src)?;
        let anim = AnimateScene {
            body: &scene.body,
            human: &composed.human,
            object: &composed.object,
            motion: &scene.motion,
            prompt: &scene.manifest.prompt,
            interaction_tokens: &scene.manifest.interaction_tokens,
            settings: &rt.settings,
        };
        if let Some(a) = &animation {
            residuals = a.residuals.clone();
        }
        let posed = posed_clouds(&anim, &residuals, animation.as_ref().map(|a| &a.field), &spec.frames)?;
        clouds.extend(spec.frames.iter().map(|&f| Some(f)).zip(posed));
    }

    let dir = render_dir(&scene.output);
    create_dir(&dir)?;
    let views: Vec<f64> = match spec.turntable {
        Some(n) => (0..n).map(|k| spec.azimuth + 360.0 * k as f64 / n as f64).collect(),
        None => vec![spec.azimuth],
    };
    let radius = spec.radius.unwrap_or(cfg.camera.radius);
    let mut out = Vec::new();
    for (frame, cloud) in &clouds {
        let stem = frame.map(|f| format!("f{f:03}")).unwrap_or_else(|| "static".into());
        for (v, &az) in views.iter().enumerate() {
            let camera = Camera::orbit(Vector3::from(cfg.camera.target), radius, spec.elevation, az, cfg.camera.fov, spec.size, spec.size);
            let r = rasterize(cloud, &camera, &rt.settings)?;
            let view = RenderedView {
                frame: *frame,
                view: v,
                azimuth: az,
                elevation: spec.elevation,
                rgb: dir.join(format!("{stem}_v{v:02}.png")),
                alpha: dir.join(format!("{stem}_v{v:02}_alpha.png")),
                depth: dir.join(format!("{stem}_v{v:02}_depth.png")),
            };
            write_png_rgb(&view.rgb, &r.rgb)?;
            write_png_rgb(&view.alpha, &r.alpha)?;
            write_png_depth16(&view.depth, &r.depth)?;
            out.push(view);
        }
        if spec.ply {
            save_ply(cloud, dir.join(format!("{stem}.ply")))?;
        }
    }
    if spec.ply && !spec.frames.is_empty() {
        let mut m = animation_manifest(scene, &residuals, Some(&spec.frames));
        for f in &mut m.frames {
            f.ply = Some(format!("f{:03}.ply", f.frame));
        }
        write_json(&dir.join("animation.json"), &m)?;
    }
    write_json(&dir.join("views.json"), &out)?;
    Ok(out)
}

/// Centroid of the bundled arm's gaussians beyond the wrist.
pub fn hand_centroid(human: &GaussianCloud) -> Vector3<f64> {
    let wrist = assets::ARM_JOINTS_X[3];
    let hand: Vec<&Vector3<f64>> = human.means.iter().filter(|m| m.x > wrist).collect();
    hand.iter().fold(Vector3::zeros(), |a, m| a + *m) / hand.len().max(1) as f64
}

/// Disk mask around the hand in the contact camera's normalized image
/// coordinates.
pub fn hand_disk(human: &GaussianCloud) -> MockMask {
    let camera = contact_camera(human);
    let (fx, fy, cx, cy) = camera.intrinsics();
    let p = camera.to_camera(&hand_centroid(human));
    let (w, h) = (camera.width as f64, camera.height as f64);
    MockMask::Disk { center: [(fx * p.x / p.z + cx) / w, (fy * p.y / p.z + cy) / h], radius: fx * 0.07 / p.z / w }
}

/// Files written by `duet fixtures`.
pub const FIXTURE_MANIFEST: &str = "manifest.json";

/// Writes the bundled procedural assets and a ready-to-run manifest.
pub fn cmd_fixtures(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    create_dir(dir)?;
    let human = assets::arm_cloud();
    let mut penetrating = assets::cube_cloud(0.1);
    for m in &mut penetrating.means {
        m.x += 0.1;
    }
    let clouds = [
        ("human.ply", human.clone()),
        ("object.ply", assets::cube_cloud(assets::HELD_CUBE_EDGE)),
        ("held_cube.ply", assets::held_cube()),
        ("penetrating_cube.ply", penetrating),
        ("sphere.ply", assets::sphere_cloud(0.3, 400)),
    ];
    let mut written = Vec::new();
    for (name, cloud) in &clouds {
        let p = dir.join(name);
        save_ply(cloud, &p)?;
        written.push(p);
    }
    let body = dir.join("body.json");
    assets::arm_body().save(&body)?;
    let motion = dir.join("motion.json");
    assets::arm_raise_motion().save(&motion)?;
    written.extend([body, motion]);

    let manifest = SceneManifest {
        human: "human.ply".into(),
        object: "object.ply".into(),
        body: "body.json".into(),
        motion: "motion.json".into(),
        prompt: "a person holding a blue cube".into(),
        interaction_tokens: vec!["holding".into()],
        body_part: "hand".into(),
        providers: ProviderSpecs { segmentation: "mock:disk".into(), guidance: "mock:tokens".into(), joint_guidance: Some("mock:attractor".into()) },
        mocks: MockSettings { mask: Some(hand_disk(&human)), ..Default::default() },
        contact: ContactSettings::default(),
        compose_config: None,
        animate_config: None,
        sidecar_url: None,
        output: "out".into(),
    };
    let p = dir.join(FIXTURE_MANIFEST);
    write_json(&p, &manifest)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_disk_is_centered_right_of_the_image_center() {
        let human = assets::arm_cloud();
        let c = hand_centroid(&human);
        assert!(c.x > 0.3 && c.x < 0.45 && c.y.abs() < 1e-9 && c.z.abs() < 1e-9);
        let MockMask::Disk { center, radius } = hand_disk(&human) else { panic!() };
        // +x is image-right from the frontal camera; y = 0 is the vertical center
        assert!(center[0] > 0.65 && center[0] < 0.8, "{center:?}");
        assert!((center[1] - 0.5).abs() < 1e-9);
        assert!(radius > 0.01 && radius < 0.1);
    }
}
