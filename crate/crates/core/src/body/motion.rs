use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BodyError, PoseParams, SkinnedBody};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    /// Axis-angle per joint.
    pub pose: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

/// Motion clip as stored on disk (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub fps: f64,
    pub frames: Vec<MotionFrame>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized clip time in [0, 1] of a frame.
    pub fn time_of(&self, frame: usize) -> f64 {
        if self.frames.len() <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames.len() - 1) as f64
        }
    }

    pub fn pose(&self, frame: usize) -> PoseParams {
        let f = &self.frames[frame];
        PoseParams {
            rotations: f.pose.iter().map(|r| Vector3::from(*r)).collect(),
            root_translation: Vector3::from(f.root_translation),
            betas: Vec::new(),
            expressions: Vec::new(),
        }
    }

    pub fn validate_for(&self, body: &SkinnedBody) -> Result<(), BodyError> {
        if self.frames.is_empty() {
            return Err(BodyError::Invalid("motion has no frames".into()));
        }
        if !(self.fps > 0.0) {
            return Err(BodyError::Invalid(format!("motion fps must be positive, got {}", self.fps)));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.pose.len() != body.joint_count() {
                return Err(BodyError::Invalid(format!(
                    "motion frame {i} has {} joints, body has {}",
                    f.pose.len(),
                    body.joint_count()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BodyError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BodyError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}
