//! Adam and the composition / animation optimization loops.

pub mod adam;
mod animate;
mod compose;
mod config;
pub mod log;

pub use adam::{Adam, GroupKind, ParamGroup};
pub use animate::{evaluate_frames, posed_clouds, run_animate_stage, AnimateResult, AnimateScene, FrameMetrics};
pub use compose::{run_compose_stage, sample_placement_init, ComposeInputs, ComposeResult};
pub use config::{Ablation, CameraSampling, GuidanceConfig, InitConfig, LearningRates, LossWeights, ResidualScope, ResolutionSchedule, Stage, StageConfig};
pub use log::{MetricRecord, MetricsLog};

use std::path::PathBuf;

use thiserror::Error;

use crate::guidance::{GuidanceError, GuidanceProvider};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("checkpoint version {found} is not supported (expected {expected}); rerun the stage or convert the checkpoint with the matching release")]
    Version { found: u64, expected: u32 },
    #[error("diverged at step {step}: translation norm {norm:.3} exceeds {limit}")]
    Diverged { step: usize, norm: f64, limit: f64 },
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("rejected input: {0}")]
    Input(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Motion(#[from] crate::motion::MotionError),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Gauss(#[from] crate::gauss::GaussError),
}

/// The two guidance roles: spatial-aware SDS on the composite render and
/// the joint rgb/depth SDS used while animating.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub ssds: &'a dyn GuidanceProvider,
    pub sds: &'a dyn GuidanceProvider,
}

/// Where and how a stage writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory; nothing is written without one.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete, as if
    /// the process had been interrupted.
    pub stop_after: Option<usize>,
}

const TAG_CAMERA: u64 = 1;
const TAG_FRAMES: u64 = 2;

/// Stable per-item seed for noise sampling.
fn item_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 20) ^ item as u64
}
