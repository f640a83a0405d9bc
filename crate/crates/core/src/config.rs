//! Run configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::ClassifierConfig;
use crate::cohort::CohortConfig;
use crate::curriculum::{CurriculumConfig, StageSwitches};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::guidance::{Basis, ScorerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub bins: usize,
    pub candidates: usize,
    /// Regressors of the baseline-conditioned expectation.
    pub expectation: Basis,
    pub scorer: ScorerConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            candidates: 20,
            expectation: Basis::Quadratic,
            scorer: ScorerConfig::default(),
        }
    }
}

/// Stage switches plus the two sampling-side ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub interpolation_task: bool,
    pub interpolation_aug: bool,
    pub extrapolation_task: bool,
    pub extrapolation_aug: bool,
    pub guidance: bool,
    /// Off: score raw latents against a latent expectation instead of going
    /// through tokens and the scorer.
    pub feature_adaptation: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            interpolation_task: true,
            interpolation_aug: true,
            extrapolation_task: true,
            extrapolation_aug: true,
            guidance: true,
            feature_adaptation: true,
        }
    }
}

impl AblationConfig {
    pub fn stages(&self) -> StageSwitches {
        StageSwitches {
            interpolation_task: self.interpolation_task,
            interpolation_aug: self.interpolation_aug,
            extrapolation_task: self.extrapolation_task,
            extrapolation_aug: self.extrapolation_aug,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scales the pMCI atrophy drift of test-split patients by `1 + shift`.
    pub domain_shift: f64,
    pub cohort: CohortConfig,
    pub diffusion: DiffusionConfig,
    pub curriculum: CurriculumConfig,
    pub guidance: GuidanceConfig,
    pub classifier: ClassifierConfig,
    pub ablation: AblationConfig,
    /// Not part of the hash.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain_shift: 0.0,
            cohort: CohortConfig::default(),
            diffusion: DiffusionConfig::default(),
            curriculum: CurriculumConfig::default(),
            guidance: GuidanceConfig::default(),
            classifier: ClassifierConfig::default(),
            ablation: AblationConfig::default(),
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.diffusion.validate()?;
        self.curriculum.validate()?;
        if self.guidance.bins < 2 {
            return Err(Error::Config("guidance.bins must be >= 2".into()));
        }
        if self.guidance.candidates == 0 {
            return Err(Error::Config("guidance.candidates must be >= 1".into()));
        }
        let s = &self.guidance.scorer;
        if s.embed_dim == 0 || s.batch_size == 0 || !(s.lr > 0.0) || !(0.0..1.0).contains(&s.holdout) {
            return Err(Error::Config("guidance.scorer: invalid settings".into()));
        }
        let c = &self.classifier;
        if !(c.l2 >= 0.0) || !(c.lr > 0.0) {
            return Err(Error::Config("classifier: l2 must be >= 0 and lr > 0".into()));
        }
        if !(self.domain_shift > -1.0) || !self.domain_shift.is_finite() {
            return Err(Error::Config("domain_shift must be > -1".into()));
        }
        if self.cohort.n_patients < 10 {
            return Err(Error::Config("cohort.n_patients must be >= 10 for a 70/10/20 split".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (sorted keys, output
    /// directory excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with the root seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let other = RunConfig {
            output_dir: "elsewhere".into(),
            ..c.clone()
        };
        assert_eq!(other.hash(), c.hash());
        assert_ne!(c.with_seed(1).hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[guidance]\ncandidates = 5\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.guidance.candidates, 5);
        assert_eq!(c.guidance.bins, 64);
        assert_eq!(c.cohort.latent_dim, 16);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[guidance]\ncandidates = 0\n").is_err());
        assert!(RunConfig::from_toml("[diffusion]\nbeta_start = 0.5\nbeta_end = 0.1\n").is_err());
        assert!(RunConfig::from_toml("nonsense = 1\n").is_err());
        assert!(RunConfig::from_toml("[curriculum]\nmax_difficulty = 9\n").is_err());
        let e = RunConfig::from_toml("seed = \"x\"\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
