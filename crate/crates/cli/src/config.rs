use std::fs;
use std::path::Path;

use introspect_core::detector::{DetectorConfig, DetectorHyper, GridConfig};
use introspect_core::errorset::ErrorSetConfig;
use introspect_core::introspector::TrainHyper;
use introspect_core::naps::NapMode;
use introspect_core::scene::SceneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub scene: SceneConfig,
    pub grid: GridConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorHyper,
    pub errorset: ErrorSetConfig,
    pub introspector: IntrospectorSection,
    pub train: TrainHyper,
    pub modes: Vec<NapMode>,
    pub evaluation: EvaluationSection,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_scenes: 2000,
            scene: SceneConfig::default(),
            grid: GridConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorHyper::default(),
            errorset: ErrorSetConfig::default(),
            introspector: IntrospectorSection::default(),
            train: TrainHyper::default(),
            modes: NapMode::ALL.to_vec(),
            evaluation: EvaluationSection::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrospectorSection {
    pub width_multiplier: f64,
    pub mlp_hidden: Vec<usize>,
}

impl Default for IntrospectorSection {
    fn default() -> Self {
        Self {
            width_multiplier: 0.25,
            mlp_hidden: vec![128, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub latency_iterations: usize,
    pub latency_warmup: usize,
    /// Test frames rendered per mode by `explain`.
    pub explain_frames: usize,
    pub plots: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            latency_iterations: 1000,
            latency_warmup: 100,
            explain_frames: 4,
            plots: true,
        }
    }
}

/// Artifact directories, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scenes: String,
    pub detector: String,
    pub errorset: String,
    pub introspectors: String,
    pub reports: String,
    pub explain: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenes: "scenes".into(),
            detector: "detector".into(),
            errorset: "errorset".into(),
            introspectors: "introspectors".into(),
            reports: "reports".into(),
            explain: "explain".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |r: introspect_core::Result<()>| r.map_err(|e| CliError::Validation(e.to_string()));
        if self.n_scenes == 0 {
            return Err(CliError::Validation("n_scenes must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(CliError::Validation("modes must not be empty".into()));
        }
        let mut seen = self.modes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modes.len() {
            return Err(CliError::Validation("modes contain duplicates".into()));
        }
        v(self.scene.validate())?;
        v(self.grid.validate())?;
        if !self.grid.covers(&self.scene.bounds) {
            return Err(CliError::Validation(
                "grid does not cover the scene bounds".into(),
            ));
        }
        v(self.detector.validate())?;
        let d = &self.detector_train;
        let drawn = d.n_train_scenes.saturating_mul(if d.resample_each_epoch {
            d.epochs.max(1)
        } else {
            1
        });
        if drawn >= 1_000_000 || d.n_eval_scenes >= 1_000_000 || self.n_scenes >= 1_000_000 {
            return Err(CliError::Validation(
                "scene counts must stay below 1000000 so the seed ranges do not overlap".into(),
            ));
        }
        v(self.errorset.validate())?;
        v(self.train.validate())?;
        let w = self.introspector.width_multiplier;
        if !(w > 0.0 && w <= 1.0) {
            return Err(CliError::Validation(format!(
                "width_multiplier must be in (0, 1], got {w}"
            )));
        }
        if self.evaluation.latency_iterations == 0 {
            return Err(CliError::Validation(
                "latency_iterations must be >= 1".into(),
            ));
        }
        for p in [
            &self.paths.scenes,
            &self.paths.detector,
            &self.paths.errorset,
            &self.paths.introspectors,
            &self.paths.reports,
            &self.paths.explain,
        ] {
            if p.is_empty() || Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                return Err(CliError::Validation(format!(
                    "path `{p}` must be relative to the output root"
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_object_means_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_empty_modes_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 1}"#).is_err());
        let cfg = ExperimentConfig {
            modes: vec![],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
