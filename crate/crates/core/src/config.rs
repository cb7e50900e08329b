//! Experiment configuration: one JSON document drives generation, training,
//! evaluation, and calibration. Unknown keys are rejected at every level.

use crate::error::{Error, Result};
use crate::gpr::TemporalMode;
use crate::loss::LossConfig;
use crate::model::Ablation;
use crate::sampler::Sampler;
use crate::synth::GeneratorConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Class weighting for the cross-entropy term: explicit positive weights or
/// the keyword `"inverse-frequency"` (resolved against the training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeightSpec {
    Explicit([f64; 3]),
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: Sampler,
    pub grad_clip_norm: Option<f64>,
    pub ablation: Ablation,
    pub heads: usize,
    pub dropout: f64,
    pub mc_passes: usize,
    pub temporal_attention: TemporalMode,
    pub residual_skip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr_init: 1e-4,
            lr_min: 1e-6,
            epochs: 30,
            batch_size: 32,
            sampler: Sampler::Uniform,
            grad_clip_norm: Some(5.0),
            ablation: Ablation::CrossModal,
            heads: 8,
            dropout: 0.3,
            mc_passes: 25,
            temporal_attention: TemporalMode::ScaledDot,
            residual_skip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub class_weights: Option<ClassWeightSpec>,
    pub focal_enabled: bool,
    pub focal_gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda1: 0.1,
            lambda2: 0.01,
            class_weights: None,
            focal_enabled: false,
            focal_gamma: 2.0,
        }
    }
}

impl LossSection {
    /// Focal exponent actually applied: 0 unless the focal variant is on.
    pub fn effective_gamma(&self) -> f64 {
        if self.focal_enabled {
            self.focal_gamma
        } else {
            0.0
        }
    }

    /// Resolve the weight spec against training-split labels.
    pub fn resolve_weights(&self, train_labels: &[u8]) -> Result<Option<[f64; 3]>> {
        match &self.class_weights {
            None => Ok(None),
            Some(ClassWeightSpec::Explicit(w)) => Ok(Some(*w)),
            Some(ClassWeightSpec::Keyword(k)) if k == "inverse-frequency" => {
                Ok(Some(crate::loss::inverse_frequency_weights(train_labels)?))
            }
            Some(ClassWeightSpec::Keyword(k)) => Err(Error::Config(format!(
                "unknown class_weights keyword {k:?}; expected \"inverse-frequency\" or 3 weights"
            ))),
        }
    }

    /// Loss parameters for a concrete training split.
    pub fn to_loss_config(&self, train_labels: &[u8]) -> Result<LossConfig> {
        Ok(LossConfig {
            focal_gamma: self.effective_gamma(),
            class_weights: self.resolve_weights(train_labels)?,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Rejection fractions for the selective-prediction curve.
    pub reject_fractions: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            reject_fractions: vec![0.0, 0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub generator: GeneratorConfig,
    /// Softmax temperature fitted by calibration; absent until then.
    pub temperature: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr_init > 0.0 && t.lr_min > 0.0 && t.lr_min <= t.lr_init) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_init, got {} / {}",
                t.lr_min, t.lr_init
            )));
        }
        if t.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batchnorm statistics, got {}",
                t.batch_size
            )));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                t.dropout
            )));
        }
        if t.heads == 0 {
            return Err(Error::Config("head count must be positive".into()));
        }
        if t.mc_passes == 0 {
            return Err(Error::Config("mc_passes must be positive".into()));
        }
        if let Some(c) = t.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip_norm must be positive when set, got {c}"
                )));
            }
        }
        let l = &self.loss;
        if l.lambda1 < 0.0 || l.focal_gamma < 0.0 {
            return Err(Error::Config(
                "lambda1 and focal_gamma must be nonnegative".into(),
            ));
        }
        if let Some(ClassWeightSpec::Explicit(w)) = &l.class_weights {
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Config(format!(
                    "explicit class weights must all be positive, got {w:?}"
                )));
            }
        }
        if let Some(ClassWeightSpec::Keyword(k)) = &l.class_weights {
            if k != "inverse-frequency" {
                return Err(Error::Config(format!(
                    "unknown class_weights keyword {k:?}"
                )));
            }
        }
        for &f in &self.eval.reject_fractions {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "reject fractions must be in [0, 1), got {f}"
                )));
            }
        }
        if let Some(tau) = self.temperature {
            if !(tau > 0.0) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {tau}"
                )));
            }
        }
        self.generator.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failure: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
