use serde::{Deserialize, Serialize};

use crate::cohort::{TrajectoryRecord, GRID_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Interpolation,
    Extrapolation,
}

/// Fixed sinusoidal encoding of an integer position into `dim` values.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / dim as f64);
            if k % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// Which grid slots the denoiser sees and what it is asked to predict.
///
/// Masked slots carry no latent at all: values at those positions are dropped
/// here, before any network code runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSequence {
    target: usize,
    masked: [bool; GRID_LEN],
    latents: Vec<Option<Vec<f64>>>,
}

impl ConditionSequence {
    /// Condition with an explicit masked set. The target must be masked, the
    /// baseline must not be, and every unmasked slot must be present in the
    /// record.
    pub fn with_mask(record: &TrajectoryRecord, target: usize, masked: [bool; GRID_LEN]) -> Result<Self> {
        if target == 0 || target >= GRID_LEN {
            return Err(Error::OutOfRange(format!("target position {target}")));
        }
        if !masked[target] || masked[0] {
            return Err(Error::Invalid("target must be masked and baseline unmasked".into()));
        }
        let mut latents = Vec::with_capacity(GRID_LEN);
        for (pos, &m) in masked.iter().enumerate() {
            if m {
                latents.push(None);
            } else {
                let z = record
                    .latent(pos)
                    .ok_or_else(|| Error::Invalid(format!("unmasked position {pos} is absent")))?;
                latents.push(Some(z.to_vec()));
            }
        }
        Ok(Self { target, masked, latents })
    }

    /// Interpolation masks the target plus every record-absent slot;
    /// extrapolation additionally masks everything after the target.
    pub fn build(record: &TrajectoryRecord, target: usize, mode: TaskMode) -> Result<Self> {
        let valid = match mode {
            TaskMode::Interpolation => (1..GRID_LEN - 1).contains(&target),
            TaskMode::Extrapolation => (1..GRID_LEN).contains(&target),
        };
        if !valid {
            return Err(Error::OutOfRange(format!("target {target} invalid for {mode:?}")));
        }
        if !record.is_present(0) {
            return Err(Error::Invalid("baseline must be present".into()));
        }
        let mut masked = [false; GRID_LEN];
        for (pos, m) in masked.iter_mut().enumerate() {
            *m = !record.is_present(pos)
                || pos == target
                || (mode == TaskMode::Extrapolation && pos > target);
        }
        Self::with_mask(record, target, masked)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn masked(&self) -> &[bool; GRID_LEN] {
        &self.masked
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..GRID_LEN).filter(|&p| self.masked[p]).collect()
    }

    /// Latent fed at an unmasked slot.
    pub fn latent(&self, pos: usize) -> Option<&[f64]> {
        self.latents[pos].as_deref()
    }

    pub fn latent_dim(&self) -> usize {
        self.latents[0].as_ref().map(Vec::len).unwrap_or(0)
    }
}
