//! ND-JSON metric logs and step checkpoints.
//!
//! Layout under a run directory:
//!
//! ```text
//! {stage}/metrics.ndjson
//! {stage}/{step:06}/state.json      config, optimizer state, parameters
//! {stage}/{step:06}/hexplane.{json,bin}   (animate, float64)
//! {stage}/preview/{step:06}.png
//! ```
//!
//! `step` in a checkpoint directory name is the number of completed steps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, OptError, Stage, StageConfig};
use crate::gauss::Placement;
use crate::motion::ResidualTransform;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    pub params: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
}

impl MetricRecord {
    pub fn all_finite(&self) -> bool {
        self.losses.values().chain(self.params.values().flatten()).all(|v| v.is_finite())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>, OptError> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| OptError::Io(format!("{}: {e}", path.as_ref().display())))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| OptError::Io(e.to_string()))).collect()
}

/// Appends records to `{stage}/metrics.ndjson`.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    /// Opens the log for a run starting at `first_step`, dropping any record
    /// at or after it (left over from an interrupted run).
    pub fn open(path: PathBuf, first_step: usize) -> Result<Self, OptError> {
        let kept = if first_step > 0 && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let mut kept = Vec::new();
            for (i, l) in lines.iter().enumerate() {
                match serde_json::from_str::<MetricRecord>(l) {
                    Ok(r) if r.step < first_step => kept.push(r),
                    Ok(_) => {}
                    // a torn final line from an interrupted write
                    Err(_) if i + 1 == lines.len() => log::warn!("{}: dropping truncated last record", path.display()),
                    Err(e) => return Err(OptError::Io(format!("{}: line {}: {e}", path.display(), i + 1))),
                }
            }
            kept
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).map_err(|e| OptError::Io(e.to_string()))?);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { path })
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<(), OptError> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(|e| OptError::Io(e.to_string()))?;
        let line = serde_json::to_string(r).map_err(|e| OptError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| OptError::Io(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub version: u32,
    pub stage: Stage,
    pub step: usize,
    pub config: StageConfig,
    pub adam: Adam,
    #[serde(default)]
    pub placement: Option<Placement>,
    #[serde(default)]
    pub residuals: Vec<ResidualTransform>,
    /// Band-0 color coefficients of the human then the object, when colors
    /// are trained.
    #[serde(default)]
    pub colors: Option<Vec<f64>>,
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

pub fn checkpoint_dir(out: &Path, stage: Stage, step: usize) -> PathBuf {
    stage_dir(out, stage).join(format!("{step:06}"))
}

pub fn save_checkpoint(dir: &Path, state: &CheckpointState) -> Result<(), OptError> {
    fs::create_dir_all(dir).map_err(|e| OptError::Io(format!("{}: {e}", dir.display())))?;
    let text = serde_json::to_string_pretty(state).map_err(|e| OptError::Io(e.to_string()))?;
    // write-then-rename so an interrupted save never leaves a readable partial state
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, text).map_err(|e| OptError::Io(e.to_string()))?;
    fs::rename(&tmp, dir.join("state.json")).map_err(|e| OptError::Io(e.to_string()))
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointState, OptError> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| OptError::Io(e.to_string()))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != CHECKPOINT_VERSION as u64 {
        return Err(OptError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    serde_json::from_value(raw).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))
}

fn checkpoint_dirs(out: &Path, stage: Stage) -> Vec<(usize, PathBuf)> {
    let Ok(entries) = fs::read_dir(stage_dir(out, stage)) else { return Vec::new() };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let step: usize = e.file_name().into_string().ok()?.parse().ok()?;
            e.path().is_dir().then_some((step, e.path()))
        })
        .collect()
}

/// Highest-numbered checkpoint directory of a stage, if any.
pub fn latest_checkpoint(out: &Path, stage: Stage) -> Option<PathBuf> {
    checkpoint_dirs(out, stage).into_iter().filter(|(_, p)| p.join("state.json").exists()).max_by_key(|(s, _)| *s).map(|(_, p)| p)
}

/// Removes checkpoints past `step` so a new run never mixes with a stale one.
pub fn prune_checkpoints(out: &Path, stage: Stage, step: usize) -> Result<(), OptError> {
    for (s, p) in checkpoint_dirs(out, stage) {
        if s > step {
            fs::remove_dir_all(&p).map_err(|e| OptError::Io(format!("{}: {e}", p.display())))?;
        }
    }
    Ok(())
}
