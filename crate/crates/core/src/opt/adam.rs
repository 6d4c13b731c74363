//! Bias-corrected Adam over named parameter groups.

use serde::{Deserialize, Serialize};

use super::OptError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Plain,
    /// Consecutive 4-tuples renormalized to unit length after every step.
    Quaternion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub kind: GroupKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed (non-skipped) steps.
    pub step: u64,
    /// Steps skipped because of a non-finite gradient.
    pub skipped: u64,
    pub groups: Vec<ParamGroup>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, skipped: 0, groups: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a group and returns its index.
    pub fn add_group(&mut self, name: &str, len: usize, lr: f64, kind: GroupKind) -> Result<usize, OptError> {
        if kind == GroupKind::Quaternion && len % 4 != 0 {
            return Err(OptError::Shape(format!("quaternion group {name} has length {len}, not a multiple of 4")));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(OptError::Config(format!("learning rate of {name} must be finite and ≥ 0, got {lr}")));
        }
        self.groups.push(ParamGroup { name: name.to_string(), lr, kind, m: vec![0.0; len], v: vec![0.0; len] });
        Ok(self.groups.len() - 1)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// One update of every group. Returns `false` (and leaves parameters,
    /// moments and the step count untouched) when any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<bool, OptError> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(OptError::Shape(format!(
                "{} groups registered, got {} parameter and {} gradient slices",
                self.groups.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((g, p), d) in self.groups.iter().zip(params.iter()).zip(grads) {
            if p.len() != g.m.len() || d.len() != g.m.len() {
                return Err(OptError::Shape(format!("group {} expects {} values, got {} params and {} grads", g.name, g.m.len(), p.len(), d.len())));
            }
        }
        if grads.iter().any(|d| d.iter().any(|x| !x.is_finite())) {
            self.skipped += 1;
            log::warn!("adam: non-finite gradient, step skipped ({} so far)", self.skipped);
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((g, p), d) in self.groups.iter_mut().zip(params.iter_mut()).zip(grads) {
            for i in 0..d.len() {
                g.m[i] = self.beta1 * g.m[i] + (1.0 - self.beta1) * d[i];
                g.v[i] = self.beta2 * g.v[i] + (1.0 - self.beta2) * d[i] * d[i];
                let m_hat = g.m[i] / c1;
                let v_hat = g.v[i] / c2;
                p[i] -= g.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if g.kind == GroupKind::Quaternion {
                for q in p.chunks_exact_mut(4) {
                    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 0.0 {
                        q.iter_mut().for_each(|x| *x /= n);
                    }
                }
            }
        }
        Ok(true)
    }
}
