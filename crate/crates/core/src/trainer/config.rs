//! Run configuration, named presets and layered overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentPlan;
use crate::labeling::LabelScheme;
use crate::losses::{LossConfig, LossKind};
use crate::models::{DecodeParams, ModelKind, ModelSpec};

use super::data::ChopProfile;
use super::optim::{Schedule, SgdConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (known: {known})", known = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form path=value")]
    BadOverride(String),
    #[error("config does not match the expected shape: {0}")]
    Shape(String),
}

/// Everything a training run depends on besides the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Sequences per parallel work item. Results do not depend on it.
    pub micro_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub augment: bool,
    pub augment_plan: AugmentPlan,
    pub chop: ChopProfile,
    pub decode: DecodeParams,
    /// Boundary matching tolerance for validation, in notes.
    pub tolerance: usize,
}

pub const PRESETS: &[&str] = &[
    "smoke-cnn",
    "smoke-unet",
    "smoke-bilstm-cnn",
    "smoke-cnn-crf",
    "smoke-bilstm-crf",
    "bench-cnn",
    "bench-cnn-crf",
    "bench-bilstm-binary",
    "bench-bilstm-expdecay",
];

impl RunConfig {
    /// Full-size settings for a model/scheme pair.
    pub fn standard(kind: ModelKind, scheme: LabelScheme) -> Result<Self, ConfigError> {
        let model = ModelSpec::new(kind, scheme).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (batch_size, schedule, weight_decay) = match kind {
            ModelKind::Cnn | ModelKind::UNet => (100, Schedule::Constant, 0.0),
            ModelKind::BiLstmCnn => (32, Schedule::LSTM, 0.0),
            ModelKind::CnnCrf | ModelKind::BiLstmCrf => (256, Schedule::CRF, 5e-8),
        };
        Ok(RunConfig {
            loss: model.default_loss(),
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay,
                clip: 10.0,
                schedule,
            },
            batch_size,
            micro_batch: 4,
            epochs: 30,
            seed: 0,
            folds: 5,
            augment: false,
            augment_plan: AugmentPlan::default(),
            chop: ChopProfile::for_kind(kind),
            decode: DecodeParams::default(),
            tolerance: 0,
            model,
        })
    }

    /// Small models for quick runs. `smoke-*` cover the five model kinds
    /// with their default losses; `bench-*` are the comparison setups.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let ascend = LabelScheme::ascend();
        let mut c = match name {
            "smoke-cnn" | "bench-cnn" => {
                let mut c = Self::standard(ModelKind::Cnn, LabelScheme::Binary)?;
                c.model.channels = vec![8, 8, 8];
                c.model.kernels = vec![3, 3, 5];
                c.batch_size = 8;
                c.sgd.lr = 0.01;
                if name == "smoke-cnn" {
                    // small batches and a gentle step keep per-epoch losses monotone
                    c.batch_size = 2;
                    c.sgd.lr = 0.002;
                    c.sgd.momentum = 0.5;
                    c.sgd.schedule = Schedule::Decay { decay: 0.2 };
                }
                c
            }
            "smoke-unet" => {
                let mut c = Self::standard(ModelKind::UNet, LabelScheme::Binary)?;
                c.model.channels = vec![4, 8, 16];
                c.batch_size = 8;
                c
            }
            "smoke-bilstm-cnn" | "bench-bilstm-expdecay" | "bench-bilstm-binary" => {
                let scheme = if name == "bench-bilstm-binary" {
                    LabelScheme::Binary
                } else {
                    LabelScheme::ExpDecay
                };
                let mut c = Self::standard(ModelKind::BiLstmCnn, scheme)?;
                c.model.channels = vec![8];
                c.model.hidden = 8;
                c.model.depth = 1;
                c.model.dropout = 0.0;
                c.batch_size = 8;
                c.sgd.lr = 0.05;
                c
            }
            "smoke-cnn-crf" | "bench-cnn-crf" => {
                let mut c = Self::standard(ModelKind::CnnCrf, ascend)?;
                c.model.channels = vec![if name == "bench-cnn-crf" { 24 } else { 16 }];
                c.model.depth = 1;
                c.batch_size = 8;
                c.sgd.lr = if name == "bench-cnn-crf" { 0.02 } else { 0.002 };
                c
            }
            "smoke-bilstm-crf" => {
                let mut c = Self::standard(ModelKind::BiLstmCrf, ascend)?;
                c.model.hidden = 8;
                c.model.depth = 1;
                c.model.dropout = 0.0;
                c.batch_size = 8;
                c.sgd.lr = 0.01;
                c
            }
            _ => return Err(ConfigError::UnknownPreset(name.to_string())),
        };
        c.epochs = 5;
        c.validate()?;
        Ok(c)
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model
            .check_loss(self.loss.kind)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sgd.validate().map_err(ConfigError::Invalid)?;
        self.chop.validate().map_err(ConfigError::Invalid)?;
        self.augment_plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.loss.alpha > 0.0) {
            return bad(format!("loss alpha must be positive, got {}", self.loss.alpha));
        }
        if self.loss.kind == LossKind::PenalizedMse && self.loss.alpha < 0.5 {
            return bad(format!("penalized MSE needs alpha >= 0.5, got {}", self.loss.alpha));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.epochs == 0 {
            return bad("batch size, micro-batch size and epochs must be positive".into());
        }
        Ok(())
    }

    /// Applies a partial JSON object on top of this config.
    pub fn merged(&self, patch: &Value) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch, "")?;
        from_value(base)
    }

    /// Applies `path=value` overrides; values are read as JSON, falling back
    /// to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        for s in sets {
            let s = s.as_ref();
            let (path, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut base;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(key))
                    .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
            }
            *slot = value;
        }
        from_value(base)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn from_value(v: Value) -> Result<RunConfig, ConfigError> {
    let c: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Shape(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                // tagged enums may switch variant, so replace them wholesale
                if k == "kind" || k == "scheme" {
                    b.insert(k.clone(), v.clone());
                    continue;
                }
                let slot = b.get_mut(k).ok_or(ConfigError::UnknownKey(full.clone()))?;
                merge(slot, v, &full)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            assert_eq!(c.epochs, 5, "{p}");
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn standard_settings() {
        let c = RunConfig::standard(ModelKind::CnnCrf, LabelScheme::ascend()).unwrap();
        assert_eq!((c.batch_size, c.sgd.weight_decay), (256, 5e-8));
        assert_eq!(c.loss.kind, LossKind::CrfNll);
        let c = RunConfig::standard(ModelKind::BiLstmCnn, LabelScheme::ExpDecay).unwrap();
        assert_eq!((c.batch_size, c.sgd.schedule), (32, Schedule::LSTM));
        assert!(RunConfig::standard(ModelKind::Cnn, LabelScheme::ascend()).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::preset("smoke-cnn").unwrap();
        let d = c.with_overrides(&["sgd.lr=0.5", "epochs=2", "model.channels=[4,4,4]"]).unwrap();
        assert_eq!((d.sgd.lr, d.epochs, d.model.channels.clone()), (0.5, 2, vec![4, 4, 4]));
        assert!(matches!(c.with_overrides(&["sgd.nope=1"]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.with_overrides(&["epochs"]), Err(ConfigError::BadOverride(_))));
        assert!(matches!(c.with_overrides(&["sgd.lr=-1"]), Err(ConfigError::Invalid(_))));
        let e = c
            .with_overrides(&[r#"sgd.schedule={"kind":"decay","decay":0.5}"#])
            .unwrap();
        assert_eq!(e.sgd.schedule.lr(1.0, 1), 0.5);
    }

    #[test]
    fn merge_partial_file() {
        let c = RunConfig::preset("smoke-cnn").unwrap();
        let patch: Value = serde_json::from_str(r#"{"seed": 9, "sgd": {"momentum": 0.5}}"#).unwrap();
        let d = c.merged(&patch).unwrap();
        assert_eq!((d.seed, d.sgd.momentum, d.sgd.lr), (9, 0.5, c.sgd.lr));
        let bad: Value = serde_json::from_str(r#"{"sgd": {"speed": 1}}"#).unwrap();
        assert!(c.merged(&bad).is_err());
        let roundtrip: RunConfig = serde_json::from_str(&c.to_json_pretty()).unwrap();
        assert_eq!(roundtrip, c);
    }
}
