//! Model assembly: features from the extractor feed the regression head and, for
//! multi-task variants, the classification head.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneKind, BackboneSpec};
use crate::error::{Error, Result};
use crate::extractor::{MsExtractor, MultiScaleFeatures};
use crate::head::{mlp_param_count, ClassificationHead, HeadConfig, RegressionHead};
use crate::nn::{Mode, ParamStore};

/// Architecture variants compared in the ablation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone, global pooling of the last stage, plain regressor.
    ResnetOnly,
    /// Multi-scale features with the regression head only.
    Type1,
    /// Multi-scale features, both heads, fixed equal loss weights.
    Type2,
    /// Multi-scale features, both heads, progressive loss weights.
    PmtFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ResnetOnly, Variant::Type1, Variant::Type2, Variant::PmtFull];

    pub fn uses_multi_scale(self) -> bool {
        !matches!(self, Variant::ResnetOnly)
    }

    pub fn has_classifier(self) -> bool {
        matches!(self, Variant::Type2 | Variant::PmtFull)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ResnetOnly => "resnet_only",
            Variant::Type1 => "type1",
            Variant::Type2 => "type2",
            Variant::PmtFull => "pmt_full",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every architecture hyperparameter of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub proj_width: usize,
    pub reg_widths: Vec<usize>,
    pub cls_widths: Vec<usize>,
    pub num_classes: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(backbone: BackboneSpec, num_classes: usize) -> Self {
        Self {
            backbone,
            proj_width: 256,
            reg_widths: vec![512, 256, 128],
            cls_widths: vec![512, 256],
            num_classes,
            variant: Variant::PmtFull,
        }
    }

    /// Width `h` of the vector the heads consume.
    pub fn feature_width(&self) -> usize {
        if self.variant.uses_multi_scale() {
            self.backbone.num_stages() * self.proj_width
        } else {
            *self.backbone.stage_channels.last().unwrap_or(&0)
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            input_width: self.feature_width(),
            reg_widths: self.reg_widths.clone(),
            cls_widths: self.cls_widths.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.proj_width == 0 {
            return Err(Error::config("projection width must be >= 1"));
        }
        self.head_config().validate()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.feature_width();
        let features = if self.variant.uses_multi_scale() {
            MsExtractor::param_count(&self.backbone, self.proj_width)
        } else {
            self.backbone.param_count()
        };
        let cls = if self.variant.has_classifier() {
            mlp_param_count(h, &self.cls_widths, self.num_classes)
        } else {
            0
        };
        features + mlp_param_count(h, &self.reg_widths, 1) + cls
    }
}

/// Relative band within which ablation variants must match the full model's size.
pub const ABLATION_PARAM_TOLERANCE: f64 = 0.10;

/// Rescales the regression-head widths of `cfg` so its parameter count is as close
/// as possible to `target`.
pub fn match_param_budget(cfg: &ModelConfig, target: usize) -> Result<ModelConfig> {
    let base = cfg.reg_widths.clone();
    let scaled = |alpha: f64| {
        let mut c = cfg.clone();
        c.reg_widths = base.iter().map(|&w| ((w as f64 * alpha).round() as usize).max(1)).collect();
        c
    };
    let (mut lo, mut hi) = (1e-3f64, 1e3f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if scaled(mid).param_count() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [scaled(lo), scaled(hi)]
        .into_iter()
        .min_by_key(|c| c.param_count().abs_diff(target))
        .expect("two candidates");
    let rel = best.param_count().abs_diff(target) as f64 / target as f64;
    if rel > ABLATION_PARAM_TOLERANCE {
        return Err(Error::config(format!(
            "variant {} cannot reach {target} parameters within ±10%: best is {} with regression widths {:?}",
            cfg.variant,
            best.param_count(),
            best.reg_widths
        )));
    }
    Ok(best)
}

/// The four ablation variants derived from a full model config; the variants
/// without the classification head get wider regressors to match its size.
pub fn ablation_configs(full: &ModelConfig) -> Result<Vec<ModelConfig>> {
    let full = ModelConfig { variant: Variant::PmtFull, ..full.clone() };
    let target = full.param_count();
    Variant::ALL
        .iter()
        .map(|&v| {
            let cfg = ModelConfig { variant: v, ..full.clone() };
            if v.has_classifier() {
                Ok(cfg)
            } else {
                match_param_budget(&cfg, target)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
enum Features {
    MultiScale(MsExtractor),
    LastStage(Backbone),
}

/// Output of one forward pass: scores `B×1` and, for multi-task variants, logits `B×K`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub score: Tensor,
    pub logits: Option<Tensor>,
}

/// The full network together with its parameters.
#[derive(Debug, Clone)]
pub struct PmtModel {
    config: ModelConfig,
    store: ParamStore,
    features: Features,
    reg: RegressionHead,
    cls: Option<ClassificationHead>,
}

impl PmtModel {
    pub fn new(config: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = store.builder(&mut rng);
        let features = if config.variant.uses_multi_scale() {
            Features::MultiScale(MsExtractor::new(&config.backbone, config.proj_width, &mut b)?)
        } else {
            Features::LastStage(Backbone::new(&config.backbone, &mut b.pp("backbone"))?)
        };
        let h = config.feature_width();
        let reg = RegressionHead::new(&mut b.pp("reg"), h, &config.reg_widths)?;
        let cls = if config.variant.has_classifier() {
            Some(ClassificationHead::new(&mut b.pp("cls"), h, &config.cls_widths, config.num_classes)?)
        } else {
            None
        };
        Ok(Self { config: config.clone(), store, features, reg, cls })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn regression_head(&self) -> &RegressionHead {
        &self.reg
    }

    pub fn classification_head(&self) -> Option<&ClassificationHead> {
        self.cls.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn backbone(&self) -> &Backbone {
        match &self.features {
            Features::MultiScale(ms) => &ms.backbone,
            Features::LastStage(b) => b,
        }
    }

    /// Raw backbone stage maps.
    pub fn extract_stages(&self, images: &Tensor, mode: &Mode<'_>) -> Result<Vec<Tensor>> {
        self.backbone().stages(images, mode)
    }

    /// Head input. For `ResnetOnly` this is the pooled last stage as a single block.
    pub fn features(&self, images: &Tensor, mode: &Mode<'_>) -> Result<MultiScaleFeatures> {
        match &self.features {
            Features::MultiScale(ms) => ms.forward(images, mode),
            Features::LastStage(b) => {
                let maps = b.stages(images, mode)?;
                let last = maps.last().ok_or_else(|| Error::shape("backbone produced no stages"))?;
                MultiScaleFeatures::from_stages(vec![last.mean((2, 3))?])
            }
        }
    }

    pub fn forward(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<ModelOutput> {
        let f = self.features(images, mode)?;
        self.forward_features(&f.fused, mode)
    }

    pub fn forward_features(&self, fused: &Tensor, mode: &mut Mode<'_>) -> Result<ModelOutput> {
        let score = self.reg.regress(fused, mode)?;
        let logits = match &self.cls {
            Some(c) => Some(c.classify_logits(fused, mode)?),
            None => None,
        };
        Ok(ModelOutput { score, logits })
    }

    /// Replaces backbone weights from a safetensors file using torchvision-style
    /// names, with or without a `backbone.` prefix.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<usize> {
        if self.config.backbone.kind != BackboneKind::PretrainedResnet50Class {
            return Err(Error::config("only the resnet50-class backbone loads pretrained weights"));
        }
        let raw = candle_core::safetensors::load(path, self.store.device()).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let values: BTreeMap<String, Tensor> = raw
            .into_iter()
            .map(|(k, v)| {
                let key = if k.starts_with("backbone.") { k } else { format!("backbone.{k}") };
                (key, v)
            })
            .collect();
        self.store.load(&values, "backbone.")
    }

    /// Replaces every parameter and buffer.
    pub fn load_state(&self, values: &BTreeMap<String, Tensor>) -> Result<usize> {
        self.store.load(values, "")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::new(BackboneSpec::toy(vec![8, 16]), 5)
    }

    #[test]
    fn closed_form_counts_match_instantiated_models() {
        for cfg in ablation_configs(&toy()).unwrap() {
            let m = PmtModel::new(&cfg, DType::F32, &Device::Cpu, 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{}", cfg.variant);
        }
        let small = ModelConfig { proj_width: 4, reg_widths: vec![3, 2, 2], cls_widths: vec![3, 2], ..toy() };
        let m = PmtModel::new(&small, DType::F64, &Device::Cpu, 0).unwrap();
        assert_eq!(m.param_count(), small.param_count());
    }

    #[test]
    fn resnet50_count_matches_reference() {
        // torchvision resnet50 without its fc layer: 25 557 032 - (2048·1000 + 1000)
        assert_eq!(BackboneSpec::resnet50(false).param_count(), 23_508_032);
    }

    #[test]
    fn ablation_variants_within_budget() {
        let configs = ablation_configs(&toy()).unwrap();
        let target = configs[3].param_count() as f64;
        for c in &configs {
            let rel = (c.param_count() as f64 - target).abs() / target;
            assert!(rel <= ABLATION_PARAM_TOLERANCE, "{} off by {rel}", c.variant);
        }
        assert_eq!(configs[2].param_count(), configs[3].param_count());
    }

    #[test]
    fn resnet_only_has_no_classifier_or_projection() {
        let cfg = ablation_configs(&toy()).unwrap().remove(0);
        let m = PmtModel::new(&cfg, DType::F32, &Device::Cpu, 0).unwrap();
        assert!(m.classification_head().is_none());
        assert_eq!(m.store().count("cls."), 0);
        assert_eq!(m.store().count("ms."), 0);
        assert_eq!(cfg.feature_width(), 16);
    }

    #[test]
    fn unreachable_budget_is_reported() {
        let cfg = ModelConfig { variant: Variant::Type1, reg_widths: vec![1, 1, 1], ..toy() };
        let err = match_param_budget(&cfg, 10).unwrap_err();
        assert!(err.to_string().contains("regression widths"));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PmtModel::new(&toy(), DType::F32, &Device::Cpu, 9).unwrap();
        let b = PmtModel::new(&toy(), DType::F32, &Device::Cpu, 9).unwrap();
        let c = PmtModel::new(&toy(), DType::F32, &Device::Cpu, 10).unwrap();
        let w = |m: &PmtModel| m.store().tensors()["reg.fc1.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(w(&a), w(&b));
        assert_ne!(w(&a), w(&c));
    }
}
