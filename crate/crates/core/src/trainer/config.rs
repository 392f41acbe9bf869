use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, MixMode, SpecPolicy};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

/// How interpolated rows are distilled from their parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CosOptions {
    /// Use the teacher's argmax labels instead of its full distribution.
    pub hard: bool,
    /// Distill intermediate CTC taps as well as the final head.
    pub inter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub cmvn: bool,
    pub model: ModelConfig,
    /// Interpolation settings; `None` trains without mixing.
    pub augment: Option<AugmentConfig>,
    /// Applied to every training batch before interpolation.
    pub spec_augment: Option<SpecPolicy>,
    pub cos: CosOptions,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub warmup: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Upper bound on autoregressive hypothesis length during evaluation.
    pub max_decode_len: usize,
    /// Rows per forward pass during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    /// Encoder-only CTC baseline on the default corpus layout.
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("data/train.jsonl"),
            dev_manifest: PathBuf::from("data/dev.jsonl"),
            cmvn: true,
            model: ModelConfig::enc_ctc(),
            augment: None,
            spec_augment: None,
            cos: CosOptions::default(),
            weights: LossWeights::enc_ctc(),
            optimizer: OptimizerConfig::default(),
            warmup: 400,
            batch_size: 16,
            max_steps: 3000,
            eval_interval: 100,
            patience: 20,
            seed: 0,
            label_smoothing: 0.1,
            max_decode_len: 24,
            eval_batch_size: 50,
        }
    }
}

impl TrainConfig {
    /// Encoder-decoder baseline with joint CTC.
    pub fn enc_dec() -> Self {
        Self {
            model: ModelConfig::enc_dec(),
            weights: LossWeights::enc_dec(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative manifest paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_manifest, &mut cfg.dev_manifest] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.weights.validate()?;
        if !self.model.has_decoder() && (self.weights.ce > 0.0 || self.weights.ce_cos > 0.0) {
            return bad("a model without a decoder must have zero CE and CE-COS weights".into());
        }
        if self.warmup < 1 {
            return bad("warmup must be >= 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.eval_interval < 1 {
            return bad("eval_interval must be >= 1".into());
        }
        if self.max_decode_len < 1 {
            return bad("max_decode_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        let o = &self.optimizer;
        if !(o.lr_peak > 0.0 && o.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be positive, got {}", o.lr_peak));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.clip_norm >= 0.0) {
            return bad("Adam eps must be > 0 and clip_norm >= 0".into());
        }
        if let Some(a) = &self.augment {
            a.validate()?;
            if self.batch_size < 2 {
                return bad("interpolation needs batch_size >= 2".into());
            }
            if a.spec_policy.is_some() {
                return bad("set SpecAugment through the top-level spec_augment field".into());
            }
            let cos = self.weights.ctc_cos > 0.0 || self.weights.ce_cos > 0.0;
            if cos && a.mode == MixMode::Replace {
                return bad("COS needs the original rows in the batch; use append mode".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::from_json(r#"{"batch_sise": 4}"#).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = TrainConfig::enc_dec();
        cfg.augment = Some(AugmentConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn decoderless_model_rejects_ce() {
        let cfg = TrainConfig {
            weights: LossWeights::enc_dec(),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn replace_mode_with_cos_is_rejected() {
        let cfg = TrainConfig {
            augment: Some(AugmentConfig {
                mode: MixMode::Replace,
                ..AugmentConfig::default()
            }),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let plain = TrainConfig {
            augment: Some(AugmentConfig {
                mode: MixMode::Replace,
                ..AugmentConfig::default()
            }),
            weights: LossWeights {
                ctc_cos: 0.0,
                ..LossWeights::enc_ctc()
            },
            ..TrainConfig::default()
        };
        plain.validate().unwrap();
    }
}
