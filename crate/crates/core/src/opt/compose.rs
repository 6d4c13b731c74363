//! Stage 1: place the object against the human under spatial-aware SDS.

use std::path::Path;

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};

use super::log::{checkpoint_dir, latest_checkpoint, load_checkpoint, prune_checkpoints, save_checkpoint, stage_dir, CheckpointState, MetricRecord, MetricsLog, CHECKPOINT_VERSION};
use super::{item_seed, Adam, GroupKind, OptError, Providers, RunOptions, Stage, StageConfig, TAG_CAMERA};
use crate::gauss::{Camera, GaussianCloud, Placement, PlacementGrad};
use crate::guidance::{ssds_grad, NoiseSchedule, SdsQuery};
use crate::math::{self, Quat};
use crate::render::{rasterize, rasterize_with_pullback, write_png_rgb, RenderGrad, RenderSettings};

pub struct ComposeInputs<'a> {
    pub human: &'a GaussianCloud,
    /// Object in its own frame, roughly centered at the origin.
    pub object: &'a GaussianCloud,
    /// Contact-retargeting translation `T_init`.
    pub anchor: Vector3<f64>,
    pub prompt: &'a str,
    pub interaction_tokens: &'a [String],
    pub settings: &'a RenderSettings,
}

#[derive(Clone, Debug)]
pub struct ComposeResult {
    pub placement: Placement,
    pub human: GaussianCloud,
    /// Object with the placement applied (canonical human space).
    pub object: GaussianCloud,
    pub metrics: Vec<MetricRecord>,
    pub adam: Adam,
    /// Completed steps.
    pub steps: usize,
}

/// `R ~ N(mean, std)` normalized, `S ~ N(mean, std)` floored, `T = 0`.
pub fn sample_placement_init(cfg: &StageConfig, anchor: Vector3<f64>) -> Result<Placement, OptError> {
    let mut rng = cfg.step_rng(0, usize::MAX);
    let i = &cfg.init;
    let mut q: Quat = i.rotation_mean;
    if i.rotation_std > 0.0 {
        let n = Normal::new(0.0, i.rotation_std).map_err(|e| OptError::Config(e.to_string()))?;
        for v in &mut q {
            *v += n.sample(&mut rng);
        }
    }
    if math::quat_norm(&q) == 0.0 {
        return Err(OptError::Config("rotation init has zero norm".into()));
    }
    let mut s = i.scale_mean;
    if i.scale_std > 0.0 {
        s += Normal::new(0.0, i.scale_std).map_err(|e| OptError::Config(e.to_string()))?.sample(&mut rng);
    }
    let mut p = Placement::new(s.max(i.scale_floor), math::quat_normalize(&q), Vector3::zeros());
    p.anchor = anchor.into();
    Ok(p)
}

struct Params {
    placement: Placement,
    colors: Option<Vec<f64>>,
}

fn param_record(p: &Params) -> std::collections::BTreeMap<String, Vec<f64>> {
    [
        ("scale".to_string(), vec![p.placement.scale]),
        ("rotation".to_string(), p.placement.rotation.to_vec()),
        ("translation".to_string(), p.placement.translation.to_vec()),
    ]
    .into()
}

fn dc_of(cloud: &GaussianCloud) -> Vec<f64> {
    (0..cloud.len()).flat_map(|i| cloud.sh_of(i)[..3].to_vec()).collect()
}

fn set_dc(cloud: &mut GaussianCloud, dc: &[f64]) {
    for i in 0..cloud.len() {
        cloud.sh_of_mut(i)[..3].copy_from_slice(&dc[3 * i..3 * i + 3]);
    }
}

fn build_adam(cfg: &StageConfig, n_colors: Option<usize>) -> Result<Adam, OptError> {
    let mut adam = Adam::new();
    adam.add_group("scale", 1, cfg.lr.scale, GroupKind::Plain)?;
    adam.add_group("rotation", 4, cfg.lr.rotation, GroupKind::Quaternion)?;
    adam.add_group("translation", 3, cfg.lr.translation, GroupKind::Plain)?;
    if let Some(n) = n_colors {
        adam.add_group("color", n, cfg.lr.color, GroupKind::Plain)?;
    }
    Ok(adam)
}

fn scene_of(inputs: &ComposeInputs, p: &Params) -> Result<(GaussianCloud, GaussianCloud, GaussianCloud), OptError> {
    let mut human = inputs.human.clone();
    let mut object = inputs.object.clone();
    if let Some(dc) = &p.colors {
        let nh = 3 * human.len();
        set_dc(&mut human, &dc[..nh]);
        set_dc(&mut object, &dc[nh..]);
    }
    let placed = p.placement.apply(&object)?;
    let mut scene = human.clone();
    scene.extend_from(&placed)?;
    Ok((scene, object, placed))
}

/// Fixed frontal preview camera.
pub(super) fn preview_camera(cfg: &StageConfig) -> Camera {
    Camera::orbit(Vector3::from(cfg.camera.target), cfg.camera.radius, 0.0, 0.0, cfg.camera.fov, cfg.preview_size, cfg.preview_size)
}

pub(super) fn write_preview(out: &Path, stage: Stage, step: usize, cloud: &GaussianCloud, cfg: &StageConfig, settings: &RenderSettings) -> Result<(), OptError> {
    let dir = stage_dir(out, stage).join("preview");
    std::fs::create_dir_all(&dir).map_err(|e| OptError::Io(e.to_string()))?;
    let img = rasterize(cloud, &preview_camera(cfg), settings)?.rgb;
    write_png_rgb(dir.join(format!("{step:06}.png")), &img).map_err(|e| OptError::Io(e.to_string()))
}

/// Runs the composition stage. Each step renders `batch_size` random views
/// of the composite, takes the spatial-aware SDS gradient with the
/// interaction tokens scaled by `c`, pulls it back to `{S, R, T}` (and band-0
/// colors when enabled) and takes one Adam step on the batch mean.
pub fn run_compose_stage(inputs: &ComposeInputs, cfg: &StageConfig, providers: Providers, opts: &RunOptions) -> Result<ComposeResult, OptError> {
    cfg.validate()?;
    if inputs.object.is_empty() {
        return Err(OptError::Input("object cloud is empty".into()));
    }
    let schedule = NoiseSchedule::default();
    let t_range = schedule.range(cfg.guidance.ssds_t_range);
    let token_scales = cfg.token_scales(inputs.interaction_tokens);
    let nh = inputs.human.len();
    let n_colors = cfg.optimize_colors.then(|| 3 * (nh + inputs.object.len()));

    let mut params = Params { placement: sample_placement_init(cfg, inputs.anchor)?, colors: n_colors.map(|_| [dc_of(inputs.human), dc_of(inputs.object)].concat()) };
    let mut adam = build_adam(cfg, n_colors)?;
    let mut first = 0;
    if let (true, Some(out)) = (opts.resume, &opts.out_dir) {
        if let Some(dir) = latest_checkpoint(out, Stage::Compose) {
            let st = load_checkpoint(&dir)?;
            if st.config != *cfg {
                return Err(OptError::Config(format!("{} was written with a different configuration", dir.display())));
            }
            params.placement = st.placement.ok_or_else(|| OptError::Io("compose checkpoint lacks a placement".into()))?;
            params.colors = st.colors;
            adam = st.adam;
            first = st.step;
        }
    }
    let mut log = match &opts.out_dir {
        Some(out) => {
            std::fs::create_dir_all(stage_dir(out, Stage::Compose)).map_err(|e| OptError::Io(e.to_string()))?;
            prune_checkpoints(out, Stage::Compose, first)?;
            Some(MetricsLog::open(stage_dir(out, Stage::Compose).join("metrics.ndjson"), first)?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let save = |step: usize, params: &Params, adam: &Adam| -> Result<(), OptError> {
        if let Some(out) = &opts.out_dir {
            let st = CheckpointState {
                version: CHECKPOINT_VERSION,
                stage: Stage::Compose,
                step,
                config: cfg.clone(),
                adam: adam.clone(),
                placement: Some(params.placement.clone()),
                residuals: Vec::new(),
                colors: params.colors.clone(),
            };
            save_checkpoint(&checkpoint_dir(out, Stage::Compose, step), &st)?;
        }
        Ok(())
    };

    let mut step = first;
    while step < cfg.epochs {
        if opts.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        let (scene, object, _) = scene_of(inputs, &params)?;
        if let (Some(out), true) = (&opts.out_dir, step % cfg.preview_every == 0) {
            write_preview(out, Stage::Compose, step, &scene, cfg, inputs.settings)?;
        }
        let size = cfg.resolution.at(step);
        let mut rng = cfg.step_rng(TAG_CAMERA, step);
        let mut grad = PlacementGrad::default();
        let mut d_colors = n_colors.map(|n| vec![0.0; n]);
        let mut l_ssds = 0.0;
        if cfg.lambda.ssds > 0.0 {
            for b in 0..cfg.batch_size {
                let cam = cfg.sample_camera(&mut rng, size);
                let t = StageConfig::sample_timestep(&mut rng, t_range);
                let (out, pb) = rasterize_with_pullback(&scene, &cam, inputs.settings)?;
                let q = SdsQuery {
                    prompt: inputs.prompt.to_string(),
                    timestep: t,
                    seed: item_seed(cfg.seed, step, b),
                    guidance_scale: cfg.guidance.guidance_scale,
                    view: Some(cam),
                };
                let s = ssds_grad(&out.rgb, &token_scales, &q, providers.ssds, &schedule)?;
                l_ssds += s.loss;
                let cg = pb.apply(&RenderGrad { rgb: s.grad, ..Default::default() })?;
                let g = params.placement.pullback(&object, &cg.means[nh..], &cg.rotations[nh..], &cg.scales[nh..]);
                grad.scale += g.scale;
                grad.translation += g.translation;
                for k in 0..4 {
                    grad.rotation[k] += g.rotation[k];
                }
                if let Some(dc) = &mut d_colors {
                    for (i, c) in cg.sh_dc.iter().enumerate() {
                        for k in 0..3 {
                            dc[3 * i + k] += c[k];
                        }
                    }
                }
            }
        }
        let w = cfg.lambda.ssds / cfg.batch_size as f64;
        l_ssds /= cfg.batch_size as f64;
        let total = cfg.lambda.ssds * l_ssds;
        if !total.is_finite() {
            return Err(OptError::NonFinite { step, what: "SSDS loss".into() });
        }

        let mut s = [params.placement.scale];
        let mut q = params.placement.rotation;
        let mut tr = params.placement.translation;
        let gs = [w * grad.scale];
        let gq = grad.rotation.map(|v| w * v);
        let gt = [w * grad.translation.x, w * grad.translation.y, w * grad.translation.z];
        match (&mut params.colors, &d_colors) {
            (Some(c), Some(dc)) => {
                let gc: Vec<f64> = dc.iter().map(|v| w * v).collect();
                adam.step(&mut [&mut s, &mut q, &mut tr, c], &[&gs, &gq, &gt, &gc])?;
            }
            _ => {
                adam.step(&mut [&mut s, &mut q, &mut tr], &[&gs, &gq, &gt])?;
            }
        }
        params.placement.scale = s[0].max(cfg.init.scale_floor);
        params.placement.rotation = q;
        params.placement.translation = tr;
        let norm = Vector3::from(tr).norm();
        if !(norm <= cfg.divergence_limit) {
            return Err(OptError::Diverged { step, norm, limit: cfg.divergence_limit });
        }

        let mut rec = MetricRecord {
            step,
            losses: [("ssds".to_string(), l_ssds), ("total".to_string(), total)].into(),
            params: param_record(&params),
            seed: cfg.seed,
        };
        rec.params.insert("skipped".into(), vec![adam.skipped as f64]);
        if let Some(l) = &mut log {
            l.append(&rec)?;
        }
        metrics.push(rec);
        step += 1;
        if step % cfg.checkpoint_every == 0 || step == cfg.epochs {
            save(step, &params, &adam)?;
        }
    }
    if opts.stop_after.is_some_and(|s| step == s && step % cfg.checkpoint_every != 0) {
        save(step, &params, &adam)?;
    }
    let (_, _, placed) = scene_of(inputs, &params)?;
    let mut human = inputs.human.clone();
    if let Some(dc) = &params.colors {
        set_dc(&mut human, &dc[..3 * nh]);
    }
    Ok(ComposeResult { placement: params.placement, human, object: placed, metrics, adam, steps: step })
}
