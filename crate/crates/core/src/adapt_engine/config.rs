//! Experiment configuration: defaults, JSON files and dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discrepancy::{DiscrepancyConfig, DlTerms, KernelConfig, Measure, OksConfig, RelationMask};
use crate::error::{Error, Result};
use crate::heatmap_codec::CodecConfig;
use crate::model_zoo::{BackboneSpec, ModelConfig, VariantTag};
use crate::synthpose_data::{DomainShift, RenderConfig, SkeletonSpec};

/// How Stage B realizes the maximization of the branch disagreement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Maximization {
    /// Regress the adversarial head onto the ground-false heatmap of the
    /// inference head and negate the discrepancy term.
    #[default]
    GroundFalse,
    /// Negate both the heatmap disagreement and the discrepancy term.
    Negation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub skeleton: SkeletonSpec,
    pub render: RenderConfig,
    pub source: DomainShift,
    pub target: DomainShift,
    pub unseen: DomainShift,
    pub source_count: usize,
    pub target_count: usize,
    /// Size of each labelled evaluation split.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            skeleton: SkeletonSpec::default(),
            render: RenderConfig::default(),
            source: DomainShift::source(),
            target: DomainShift::target(),
            unseen: DomainShift::unseen(),
            source_count: 2000,
            target_count: 2000,
            eval_count: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Iterations per epoch; one pass over the source set when unset.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub oks_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            iters_per_epoch: None,
            batch_size: 32,
            lr: 1e-3,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            oks_weight: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Iterations per epoch; one pass over the target set when unset.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `lr = lr0 * (1 + decay_rate * iteration) ^ -decay_power`.
    pub decay_rate: f64,
    pub decay_power: f64,
    /// Save a checkpoint every this many epochs when a run directory is set (0 = only at the end).
    pub checkpoint_every: usize,
    /// Evaluate the branch disagreement on a held target batch around every
    /// Stage B and C step (0 = off; n = every n-th iteration).
    pub probe_every: usize,
    pub probe_batch: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            iters_per_epoch: None,
            batch_size: 32,
            lr_backbone: 3e-5,
            lr_heads: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_rate: 0.04,
            decay_power: 0.75,
            checkpoint_every: 0,
            probe_every: 0,
            probe_batch: 32,
        }
    }
}

impl AdaptConfig {
    pub fn decay(&self, iteration: usize) -> f64 {
        (1.0 + self.decay_rate * iteration as f64).powf(-self.decay_power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_ratio: f64,
    /// Normalizing size in heatmap units; the larger heatmap side when unset.
    pub norm_size: Option<f64>,
    pub batch_size: usize,
    /// Evaluate target PCK on the validation split every this many epochs (0 = off).
    pub validate_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold_ratio: 0.05, norm_size: None, batch_size: 100, validate_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub variant: VariantTag,
    pub dl_variant: Measure,
    pub dl_terms: DlTerms,
    pub relation_mask: RelationMask,
    pub symmetric_r2: bool,
    pub maximization: Maximization,
    pub kernel: KernelConfig,
    pub oks: OksConfig,
    pub codec: CodecConfig,
    pub backbone: BackboneSpec,
    pub head_width: usize,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha1: 0.5,
            alpha2: 0.5,
            beta: 0.2,
            gamma: 0.55,
            variant: VariantTag::Idf,
            dl_variant: Measure::Mmd,
            dl_terms: DlTerms::Full,
            relation_mask: RelationMask::ALL,
            symmetric_r2: false,
            maximization: Maximization::GroundFalse,
            kernel: KernelConfig::default(),
            oks: OksConfig::default(),
            codec: CodecConfig::default(),
            backbone: BackboneSpec::default(),
            head_width: ModelConfig::default().head_width,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { variant: self.variant, backbone: self.backbone.clone(), head_width: self.head_width }
    }

    pub fn discrepancy(&self) -> DiscrepancyConfig {
        DiscrepancyConfig {
            kernel: self.kernel.clone(),
            measure: self.dl_variant,
            terms: self.dl_terms,
            relations: self.relation_mask,
            symmetric_r2: self.symmetric_r2,
        }
    }

    /// Whether any stage evaluates the discrepancy loss.
    pub fn uses_dl(&self) -> bool {
        self.dl_terms != DlTerms::None && (self.beta > 0.0 || self.gamma > 0.0)
    }

    pub fn keypoints(&self) -> usize {
        self.data.skeleton.keypoints()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        let m = self.relation_mask;
        if self.uses_dl() && !(m.r1 || m.r2 || m.r3) {
            return Err(Error::Config("relation_mask must not be empty while the discrepancy loss is enabled".into()));
        }
        self.kernel.validate()?;
        self.codec.validate()?;
        self.data.skeleton.validate()?;
        self.data.render.validate()?;
        for s in [&self.data.source, &self.data.target, &self.data.unseen] {
            s.validate()?;
        }
        let hs = self.data.render.heatmap_size();
        if self.codec.heatmap_size != (hs, hs) {
            return Err(Error::Config(format!(
                "codec.heatmap_size {:?} does not match the rendered image size over the stride ({hs}, {hs})",
                self.codec.heatmap_size
            )));
        }
        let size = self.data.render.image_size;
        if self.backbone.input_shape != (3, size, size) {
            return Err(Error::Config(format!("backbone.input_shape must be (3, {size}, {size}) for rendered images")));
        }
        self.model_config().validate(self.codec.heatmap_size)?;
        self.oks.resolve(self.keypoints(), self.codec.heatmap_size)?;
        if self.pretrain.batch_size == 0 || self.adapt.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.data.source_count == 0 || self.data.target_count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(self.eval.threshold_ratio > 0.0) || self.eval.norm_size.is_some_and(|n| !(n > 0.0)) {
            return Err(Error::Config("eval.threshold_ratio and eval.norm_size must be positive".into()));
        }
        if !(self.pretrain.lr > 0.0 && self.adapt.lr_backbone >= 0.0 && self.adapt.lr_heads >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative (pretrain.lr positive)".into()));
        }
        Ok(())
    }

    /// Builds a configuration from defaults, an optional JSON file and
    /// `key.path=value` overrides, in that order of precedence.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// Pretty JSON snapshot, newline terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configuration serializes");
        s.push('\n');
        s
    }
}

/// Deep-merges `patch` into `base`; objects merge key by key, and keys absent
/// from `base` are rejected.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let mut slot = &mut *value;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!((cfg.alpha1, cfg.alpha2, cfg.beta, cfg.gamma), (0.5, 0.5, 0.2, 0.55));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::resolve(
            None,
            &["gamma=0.35".into(), "kernel.base_bandwidth=2.5".into(), "relation_mask=[\"r1\"]".into(), "variant=aidf".into()],
        )
        .unwrap();
        assert_eq!(cfg.gamma, 0.35);
        assert_eq!(cfg.kernel.base_bandwidth, crate::discrepancy::BaseBandwidth::Fixed(2.5));
        assert_eq!(cfg.relation_mask, RelationMask { r1: true, r2: false, r3: false });
        assert_eq!(cfg.variant, VariantTag::Aidf);
    }

    #[test]
    fn unknown_override_key_is_named() {
        let err = ExperimentConfig::resolve(None, &["adapt.nonsense=3".into()]).unwrap_err();
        assert!(err.to_string().contains("adapt.nonsense"), "{err}");
    }

    #[test]
    fn type_errors_report_their_path() {
        let err = ExperimentConfig::resolve(None, &["adapt.epochs=\"many\"".into()]).unwrap_err();
        assert!(err.to_string().contains("adapt.epochs"), "{err}");
    }

    #[test]
    fn file_values_merge_under_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"beta": 0.4, "adapt": {"epochs": 9}}"#).unwrap();
        let cfg = ExperimentConfig::resolve(Some(&path), &["beta=0.1".into()]).unwrap();
        assert_eq!((cfg.beta, cfg.adapt.epochs), (0.1, 9));
        fs::write(&path, r#"{"adapt": {"epochz": 9}}"#).unwrap();
        assert!(ExperimentConfig::resolve(Some(&path), &[]).is_err());
    }

    #[test]
    fn empty_mask_with_active_discrepancy_is_rejected() {
        assert!(ExperimentConfig::resolve(None, &["relation_mask=[]".into()]).is_err());
        ExperimentConfig::resolve(None, &["relation_mask=[]".into(), "dl_terms=none".into()]).unwrap();
    }

    #[test]
    fn schedules() {
        let p = PretrainConfig::default();
        assert_eq!(p.lr_at(0), 1e-3);
        assert!((p.lr_at(8) - 1e-4).abs() < 1e-18);
        assert!((p.lr_at(11) - 1e-5).abs() < 1e-18);
        let a = AdaptConfig::default();
        assert_eq!(a.decay(0), 1.0);
        assert!((a.decay(25) - 2f64.powf(-0.75)).abs() < 1e-12);
    }
}
