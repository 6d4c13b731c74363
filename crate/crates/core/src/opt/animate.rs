//! Stage 2: animate the composed pair along a body motion.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix4, Vector3, Vector4};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::compose::write_preview;
use super::log::{checkpoint_dir, latest_checkpoint, load_checkpoint, prune_checkpoints, save_checkpoint, stage_dir, CheckpointState, MetricRecord, MetricsLog, CHECKPOINT_VERSION};
use super::{item_seed, Ablation, Adam, GroupKind, OptError, Providers, ResidualScope, RunOptions, Stage, StageConfig, TAG_CAMERA, TAG_FRAMES};
use crate::body::{MotionSequence, PoseParams, SkinnedBody};
use crate::gauss::{Camera, GaussianCloud};
use crate::guidance::{joint_sds_grad, ssds_grad, DepthNormalization, NoiseSchedule, SdsQuery};
use crate::hexplane::{Dtype, HexPlaneField};
use crate::math::{self, Quat};
use crate::motion::{
    correspondence_loss, correspondence_loss_hard, human_rotations, object_base_transform, object_points, penetration_fraction, Binding, PosedIndex, ResidualGrad,
    ResidualTransform,
};
use crate::render::{rasterize_with_pullback, RenderGrad, RenderSettings};

pub struct AnimateScene<'a> {
    pub body: &'a SkinnedBody,
    /// Human in canonical (rest) space.
    pub human: &'a GaussianCloud,
    /// Placed object in canonical space.
    pub object: &'a GaussianCloud,
    pub motion: &'a MotionSequence,
    pub prompt: &'a str,
    pub interaction_tokens: &'a [String],
    pub settings: &'a RenderSettings,
}

#[derive(Clone, Debug)]
pub struct AnimateResult {
    pub residuals: Vec<ResidualTransform>,
    pub field: HexPlaneField,
    pub metrics: Vec<MetricRecord>,
    pub adam: Adam,
    pub steps: usize,
}

/// Per-frame evaluation of an animated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Share of object points inside the posed body surface.
    pub penetration: f64,
    /// Soft correspondence loss (the training objective).
    pub l_ca: f64,
    /// Nearest-vertex correspondence loss.
    pub l_ca_hard: f64,
    /// Distance of the averaged object transform from the nearest rotation.
    pub rigidity: f64,
}

/// Everything fixed for a scene: bindings and per-frame posed bodies.
struct Prepared {
    binding_h: Binding,
    binding_o: Binding,
    frames: Vec<PosedIndex>,
    bases: Vec<Matrix4<f64>>,
}

fn prepare(scene: &AnimateScene) -> Result<Prepared, OptError> {
    scene.motion.validate_for(scene.body).map_err(|e| OptError::Input(e.to_string()))?;
    if scene.motion.is_empty() {
        return Err(OptError::Input("motion has no frames".into()));
    }
    if scene.object.is_empty() {
        return Err(OptError::Input("object cloud is empty".into()));
    }
    let rest = scene.body.pose(&PoseParams::zero(scene.body.joint_count()))?;
    let binding_h = Binding::new(&scene.human.means, &rest.vertices)?;
    let binding_o = Binding::new(&scene.object.means, &rest.vertices)?;
    let mut frames = Vec::with_capacity(scene.motion.len());
    let mut bases = Vec::with_capacity(scene.motion.len());
    for f in 0..scene.motion.len() {
        let posed = scene.body.pose(&scene.motion.pose(f))?;
        bases.push(object_base_transform(&binding_o, &posed)?);
        frames.push(PosedIndex::new(posed));
    }
    Ok(Prepared { binding_h, binding_o, frames, bases })
}

fn residual_slot(scope: ResidualScope, frame: usize) -> usize {
    match scope {
        ResidualScope::Shared => 0,
        ResidualScope::PerFrame => frame,
    }
}

/// Posed composite cloud at one frame, plus the object's per-gaussian
/// rotation before the residual (needed for the rotation pullback).
fn posed_scene(
    scene: &AnimateScene,
    prep: &Prepared,
    frame: usize,
    residual: &ResidualTransform,
    field: &HexPlaneField,
) -> Result<(GaussianCloud, crate::hexplane::BatchForward, Vec<Quat>, Vec<Vector3<f64>>), OptError> {
    let index = &prep.frames[frame];
    let t = scene.motion.time_of(frame);
    let fw = field.forward_batch(&scene.human.means, t);
    let mut cloud = scene.human.clone();
    for (k, (m, &v)) in cloud.means.iter_mut().zip(&prep.binding_h.vertices).enumerate() {
        let g = index.posed.vertex_matrix(v)?;
        *m = math::transform_point(g, m) + Vector3::new(fw.output[(0, k)], fw.output[(1, k)], fw.output[(2, k)]);
    }
    for (q, r) in cloud.rotations.iter_mut().zip(human_rotations(&prep.binding_h, &index.posed)?) {
        *q = math::quat_normalize(&math::quat_mul(&math::matrix_to_quat(&r), q));
    }
    let base = &prep.bases[frame];
    let (pts, moved) = object_points(&scene.object.means, base, residual);
    let q_base = math::matrix_to_quat(&math::polar_rotation(&math::linear_part(base)));
    let pre: Vec<Quat> = scene.object.rotations.iter().map(|q| math::quat_mul(&q_base, q)).collect();
    let q_r = math::quat_normalize(&residual.rotation);
    let mut object = scene.object.clone();
    object.means = pts;
    object.rotations = pre.iter().map(|p| math::quat_normalize(&math::quat_mul(&q_r, p))).collect();
    cloud.extend_from(&object)?;
    Ok((cloud, fw, pre, moved))
}

/// Evaluates every frame with the given residuals (one shared, or one per
/// frame).
pub fn evaluate_frames(scene: &AnimateScene, residuals: &[ResidualTransform], cfg: &StageConfig) -> Result<Vec<FrameMetrics>, OptError> {
    let prep = prepare(scene)?;
    let scope = if residuals.len() == 1 { ResidualScope::Shared } else { ResidualScope::PerFrame };
    if scope == ResidualScope::PerFrame && residuals.len() != scene.motion.len() {
        return Err(OptError::Shape(format!("{} residuals for {} frames", residuals.len(), scene.motion.len())));
    }
    let mut out = Vec::with_capacity(scene.motion.len());
    for f in 0..scene.motion.len() {
        let index = &prep.frames[f];
        let (pts, _) = object_points(&scene.object.means, &prep.bases[f], &residuals[residual_slot(scope, f)]);
        out.push(FrameMetrics {
            frame: f,
            penetration: penetration_fraction(&pts, &index.posed.vertices, &scene.body.faces),
            l_ca: correspondence_loss(&prep.binding_o, index, &pts, &cfg.correspondence)?.value,
            l_ca_hard: correspondence_loss_hard(&prep.binding_o, index, &pts)?,
            rigidity: math::rigidity_deviation(&math::linear_part(&prep.bases[f])),
        });
    }
    Ok(out)
}

/// Composite clouds at the given frames, for rendering. Without a field the
/// human follows LBS alone.
pub fn posed_clouds(scene: &AnimateScene, residuals: &[ResidualTransform], field: Option<&HexPlaneField>, frames: &[usize]) -> Result<Vec<GaussianCloud>, OptError> {
    let prep = prepare(scene)?;
    let scope = if residuals.len() == 1 { ResidualScope::Shared } else { ResidualScope::PerFrame };
    let zero;
    let field = match field {
        Some(f) => f,
        None => {
            zero = HexPlaneField::zeros(crate::hexplane::HexPlaneConfig { resolution: 2, feature_len: 6, hidden: vec![], ..Default::default() })
                .map_err(|e| OptError::Config(e.to_string()))?;
            &zero
        }
    };
    frames
        .iter()
        .map(|&f| {
            if f >= scene.motion.len() {
                return Err(OptError::Input(format!("frame {f} out of range (motion has {})", scene.motion.len())));
            }
            Ok(posed_scene(scene, &prep, f, &residuals[residual_slot(scope, f)], field)?.0)
        })
        .collect()
}

fn initial_residual(cfg: &StageConfig) -> ResidualTransform {
    if cfg.init.identity_residual || cfg.ablation == Ablation::WithoutResidualAndCa {
        ResidualTransform::identity()
    } else {
        ResidualTransform::new(math::quat_normalize(&cfg.init.residual_rotation), Vector3::zeros())
    }
}

/// `Σ_f ‖r_{f+1} − r_f‖²` over raw quaternions and translations, with its
/// gradient.
fn smoothness(res: &[ResidualTransform]) -> (f64, Vec<ResidualGrad>) {
    let mut grads = vec![ResidualGrad::default(); res.len()];
    let mut value = 0.0;
    for f in 1..res.len() {
        for k in 0..4 {
            let d = res[f].rotation[k] - res[f - 1].rotation[k];
            value += d * d;
            grads[f].rotation[k] += 2.0 * d;
            grads[f - 1].rotation[k] -= 2.0 * d;
        }
        for k in 0..3 {
            let d = res[f].translation[k] - res[f - 1].translation[k];
            value += d * d;
            grads[f].translation[k] += 2.0 * d;
            grads[f - 1].translation[k] -= 2.0 * d;
        }
    }
    (value, grads)
}

/// Picks the step's frames: without replacement when the batch fits.
fn sample_frames(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch <= n {
        sample(rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Runs the animation stage: each step samples a batch of frames (and one
/// camera per frame when a diffusion loss is active), deforms the human by
/// LBS plus the hexplane offset and the object by the averaged transform plus
/// the residual, and updates the residual and the hexplane with Adam on
/// `λ_CA·L_CA + λ_SDS·L_SDS + λ_SSDS·L_SSDS` (plus the smoothness term for
/// per-frame residuals).
pub fn run_animate_stage(scene: &AnimateScene, cfg: &StageConfig, providers: Providers, opts: &RunOptions) -> Result<AnimateResult, OptError> {
    cfg.validate()?;
    let prep = prepare(scene)?;
    let n_frames = scene.motion.len();
    let n_res = match cfg.residual_scope {
        ResidualScope::Shared => 1,
        ResidualScope::PerFrame => n_frames,
    };
    let train_residual = cfg.ablation != Ablation::WithoutResidualAndCa;
    let lambda_ca = if cfg.ablation == Ablation::None { cfg.lambda.ca } else { 0.0 };
    let lambda_smooth = if train_residual && cfg.residual_scope == ResidualScope::PerFrame { cfg.lambda.smooth } else { 0.0 };
    let render_needed = cfg.lambda.sds > 0.0 || cfg.lambda.ssds > 0.0;

    let mut residuals = vec![initial_residual(cfg); n_res];
    let mut field = HexPlaneField::new(cfg.hexplane.clone(), cfg.seed).map_err(|e| OptError::Config(e.to_string()))?;
    let mut adam = Adam::new();
    if train_residual {
        adam.add_group("residual_rotation", 4 * n_res, cfg.lr.rotation, GroupKind::Quaternion)?;
        adam.add_group("residual_translation", 3 * n_res, cfg.lr.translation, GroupKind::Plain)?;
    }
    if cfg.train_hexplane {
        adam.add_group("hexplane", field.param_count(), cfg.lr.hexplane, GroupKind::Plain)?;
    }

    let mut first = 0;
    if let (true, Some(out)) = (opts.resume, &opts.out_dir) {
        if let Some(dir) = latest_checkpoint(out, Stage::Animate) {
            let st = load_checkpoint(&dir)?;
            if st.config != *cfg {
                return Err(OptError::Config(format!("{} was written with a different configuration", dir.display())));
            }
            residuals = st.residuals;
            field = HexPlaneField::load(dir.join("hexplane")).map_err(|e| OptError::Io(e.to_string()))?;
            adam = st.adam;
            first = st.step;
        }
    }
    let mut log = match &opts.out_dir {
        Some(out) => {
            std::fs::create_dir_all(stage_dir(out, Stage::Animate)).map_err(|e| OptError::Io(e.to_string()))?;
            prune_checkpoints(out, Stage::Animate, first)?;
            Some(MetricsLog::open(stage_dir(out, Stage::Animate).join("metrics.ndjson"), first)?)
        }
        None => None,
    };
    let save = |step: usize, residuals: &[ResidualTransform], field: &HexPlaneField, adam: &Adam| -> Result<(), OptError> {
        if let Some(out) = &opts.out_dir {
            let dir = checkpoint_dir(out, Stage::Animate, step);
            let st = CheckpointState {
                version: CHECKPOINT_VERSION,
                stage: Stage::Animate,
                step,
                config: cfg.clone(),
                adam: adam.clone(),
                placement: None,
                residuals: residuals.to_vec(),
                colors: None,
            };
            std::fs::create_dir_all(&dir).map_err(|e| OptError::Io(e.to_string()))?;
            field.save(dir.join("hexplane"), Dtype::F64).map_err(|e| OptError::Io(e.to_string()))?;
            save_checkpoint(&dir, &st)?;
        }
        Ok(())
    };

    let schedule = NoiseSchedule::default();
    let sds_range = schedule.range(cfg.guidance.sds_t_range);
    let ssds_range = schedule.range(cfg.guidance.ssds_t_range);
    let token_scales = cfg.token_scales(scene.interaction_tokens);
    let depth_norm = DepthNormalization::around(cfg.camera.radius, cfg.guidance.depth_extent);
    let nh = scene.human.len();
    let mut metrics = Vec::new();
    let mut step = first;
    while step < cfg.epochs {
        if opts.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        if let (Some(out), true) = (&opts.out_dir, step % cfg.preview_every == 0) {
            let f = n_frames - 1;
            let (cloud, ..) = posed_scene(scene, &prep, f, &residuals[residual_slot(cfg.residual_scope, f)], &field)?;
            write_preview(out, Stage::Animate, step, &cloud, cfg, scene.settings)?;
        }
        let size = cfg.resolution.at(step);
        let frames = sample_frames(&mut cfg.step_rng(TAG_FRAMES, step), n_frames, cfg.batch_size);
        let mut cam_rng = cfg.step_rng(TAG_CAMERA, step);
        let mut res_grads = vec![ResidualGrad::default(); n_res];
        let mut field_grad = vec![0.0; field.param_count()];
        let (mut l_ca, mut l_sds, mut l_ssds) = (0.0, 0.0, 0.0);

        for (b, &f) in frames.iter().enumerate() {
            let slot = residual_slot(cfg.residual_scope, f);
            let residual = &residuals[slot];
            let index = &prep.frames[f];
            let (pts, moved) = object_points(&scene.object.means, &prep.bases[f], residual);
            let ca = correspondence_loss(&prep.binding_o, index, &pts, &cfg.correspondence)?;
            l_ca += ca.value;
            let mut d_points: Vec<Vector3<f64>> = ca.d_points.iter().map(|g| lambda_ca * g).collect();
            let mut d_rot = [0.0; 4];

            if render_needed {
                let cam: Camera = cfg.sample_camera(&mut cam_rng, size);
                let t_sds = StageConfig::sample_timestep(&mut cam_rng, sds_range);
                let t_ssds = StageConfig::sample_timestep(&mut cam_rng, ssds_range);
                let (cloud, fw, pre, _) = posed_scene(scene, &prep, f, residual, &field)?;
                let (out, pb) = rasterize_with_pullback(&cloud, &cam, scene.settings)?;
                let mut up = RenderGrad { rgb: vec![0.0; out.rgb.data.len()], depth: vec![0.0; out.depth.data.len()], ..Default::default() };
                let seed = item_seed(cfg.seed, step, b);
                let query = |t| SdsQuery { prompt: scene.prompt.to_string(), timestep: t, seed, guidance_scale: cfg.guidance.guidance_scale, view: Some(cam.clone()) };
                if cfg.lambda.sds > 0.0 {
                    let latent = depth_norm.apply(&out.depth, &out.alpha);
                    let j = joint_sds_grad(&out.rgb, &latent, &query(t_sds), &cfg.guidance.joint, providers.sds, &schedule)?;
                    l_sds += j.rgb.loss + j.depth.loss;
                    for (u, g) in up.rgb.iter_mut().zip(&j.rgb.grad) {
                        *u += cfg.lambda.sds * g;
                    }
                    for (u, g) in up.depth.iter_mut().zip(depth_norm.pullback(&j.depth.grad, &out.alpha)) {
                        *u += cfg.lambda.sds * g;
                    }
                }
                if cfg.lambda.ssds > 0.0 {
                    let s = ssds_grad(&out.rgb, &token_scales, &query(t_ssds), providers.ssds, &schedule)?;
                    l_ssds += s.loss;
                    for (u, g) in up.rgb.iter_mut().zip(&s.grad) {
                        *u += cfg.lambda.ssds * g;
                    }
                }
                let cg = pb.apply(&up)?;
                if cfg.train_hexplane {
                    let mut d_out = DMatrix::zeros(field.config.out_dim, nh);
                    for (k, g) in cg.means[..nh].iter().enumerate() {
                        for a in 0..3 {
                            d_out[(a, k)] = g[a];
                        }
                    }
                    field.backward(&fw, &d_out, &mut field_grad);
                }
                for (d, g) in d_points.iter_mut().zip(&cg.means[nh..]) {
                    *d += g;
                }
                // placed rotation = q_R ⊗ p_i
                for (p, g) in pre.iter().zip(&cg.rotations[nh..]) {
                    let m = math::quat_right_matrix(p).transpose() * Vector4::from(*g);
                    for k in 0..4 {
                        d_rot[k] += m[k];
                    }
                }
            }
            if train_residual {
                res_grads[slot].add(&residual.pullback(&moved, &d_points, Some(&d_rot)));
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        l_ca *= inv_b;
        l_sds *= inv_b;
        l_ssds *= inv_b;
        let (l_smooth, smooth_grads) = if lambda_smooth > 0.0 { smoothness(&residuals) } else { (0.0, Vec::new()) };
        let total = lambda_ca * l_ca + cfg.lambda.sds * l_sds + cfg.lambda.ssds * l_ssds + lambda_smooth * l_smooth;
        if !total.is_finite() {
            return Err(OptError::NonFinite { step, what: "animation loss".into() });
        }

        let mut q_flat: Vec<f64> = residuals.iter().flat_map(|r| r.rotation).collect();
        let mut t_flat: Vec<f64> = residuals.iter().flat_map(|r| r.translation).collect();
        let mut gq = vec![0.0; 4 * n_res];
        let mut gt = vec![0.0; 3 * n_res];
        for (i, g) in res_grads.iter().enumerate() {
            for k in 0..4 {
                gq[4 * i + k] = inv_b * g.rotation[k];
            }
            for k in 0..3 {
                gt[3 * i + k] = inv_b * g.translation[k];
            }
        }
        for (i, g) in smooth_grads.iter().enumerate() {
            for k in 0..4 {
                gq[4 * i + k] += lambda_smooth * g.rotation[k];
            }
            for k in 0..3 {
                gt[3 * i + k] += lambda_smooth * g.translation[k];
            }
        }
        field_grad.iter_mut().for_each(|g| *g *= inv_b);
        let mut ps: Vec<&mut [f64]> = Vec::new();
        let mut gs: Vec<&[f64]> = Vec::new();
        if train_residual {
            ps.push(&mut q_flat);
            ps.push(&mut t_flat);
            gs.push(&gq);
            gs.push(&gt);
        }
        if cfg.train_hexplane {
            ps.push(&mut field.params);
            gs.push(&field_grad);
        }
        adam.step(&mut ps, &gs)?;
        drop(ps);
        if train_residual {
            for (i, r) in residuals.iter_mut().enumerate() {
                r.rotation.copy_from_slice(&q_flat[4 * i..4 * i + 4]);
                r.translation.copy_from_slice(&t_flat[3 * i..3 * i + 3]);
            }
        }
        let norm = residuals.iter().map(|r| Vector3::from(r.translation).norm()).fold(0.0, f64::max);
        if !(norm <= cfg.divergence_limit) {
            return Err(OptError::Diverged { step, norm, limit: cfg.divergence_limit });
        }

        let losses: BTreeMap<String, f64> = [
            ("ca".to_string(), l_ca),
            ("sds".to_string(), l_sds),
            ("ssds".to_string(), l_ssds),
            ("smooth".to_string(), l_smooth),
            ("total".to_string(), total),
        ]
        .into();
        let params: BTreeMap<String, Vec<f64>> = [
            ("lambda".to_string(), vec![lambda_ca, cfg.lambda.sds, cfg.lambda.ssds, lambda_smooth]),
            ("residual_rotation".to_string(), residuals[0].rotation.to_vec()),
            ("residual_translation".to_string(), residuals[0].translation.to_vec()),
            ("hexplane_norm".to_string(), vec![field.params.iter().map(|v| v * v).sum::<f64>().sqrt()]),
            ("frames".to_string(), frames.iter().map(|&f| f as f64).collect()),
            ("skipped".to_string(), vec![adam.skipped as f64]),
        ]
        .into();
        let rec = MetricRecord { step, losses, params, seed: cfg.seed };
        if let Some(l) = &mut log {
            l.append(&rec)?;
        }
        metrics.push(rec);
        step += 1;
        if step % cfg.checkpoint_every == 0 || step == cfg.epochs {
            save(step, &residuals, &field, &adam)?;
        }
    }
    if opts.stop_after.is_some_and(|s| step == s && step % cfg.checkpoint_every != 0) {
        save(step, &residuals, &field, &adam)?;
    }
    Ok(AnimateResult { residuals, field, metrics, adam, steps: step })
}
