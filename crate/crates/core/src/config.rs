//! TOML run configuration: one document per run with `[dataset]`, `[model]`,
//! `[binning]`, `[schedule]`, `[train]` and `[protocol]` sections. Unknown keys are
//! rejected and every value is checked before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, BackboneSpec};
use crate::binning::BinningConfig;
use crate::dataset::{DatasetManifest, ResizePolicy, TestViews};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::WeightSchedule;
use crate::protocols::{ProtocolKind, ProtocolOptions};
use crate::train::{OptimizerKind, Precision, TrainConfig, TrainSetup};

/// Environment variable naming the directory relative manifest paths resolve against.
pub const DATASET_ROOT_ENV: &str = "DATASET_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub binning: BinningSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest CSV; its `.toml` sidecar sits next to it. May be supplied on the command line instead.
    #[serde(default)]
    pub manifest: PathBuf,
    /// Test manifest for cross-database runs.
    pub test_manifest: Option<PathBuf>,
    pub crop_size: Option<u32>,
    pub short_side: Option<u32>,
    pub num_views: Option<usize>,
    pub allow_hflip: Option<bool>,
    pub test_views: Option<TestViews>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Option<BackboneKind>,
    /// Stage widths of the toy backbone.
    pub stage_channels: Option<Vec<usize>>,
    pub pretrained_weights: Option<PathBuf>,
    /// Per-stage projection width `p`.
    pub p: Option<usize>,
    pub reg_widths: Option<Vec<usize>>,
    pub cls_widths: Option<Vec<usize>>,
    pub variant: Option<Variant>,
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSection {
    pub w: Option<f64>,
    pub y_min: Option<f64>,
    pub y_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Progressive,
    Fixed,
    RegressionOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub max_epochs: Option<usize>,
    pub xi: Option<f64>,
    pub first_epoch: Option<usize>,
    /// Overrides the schedule implied by the variant.
    pub kind: Option<ScheduleKind>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub wd: Option<f64>,
    pub dropout: Option<f64>,
    pub seed: Option<u64>,
    pub optimizer: Option<OptimizerKind>,
    pub backbone_lr_mult: Option<f64>,
    pub freeze_backbone: Option<bool>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub kind: Option<ProtocolKind>,
    pub num_runs: Option<usize>,
    pub train_fraction: Option<f64>,
    pub track_curves: Option<bool>,
}

/// A config with every path resolved and every default filled in.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub setup: TrainSetup,
    pub manifest: DatasetManifest,
    pub test_manifest: Option<DatasetManifest>,
    pub resize: ResizePolicy,
    pub protocol: ProtocolKind,
    pub options: ProtocolOptions,
}

fn key_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("`{key}`: {msg}"))
}

fn wrap<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidConfig(m) => key_err(key, m),
        other => other,
    })
}

/// Applies `section.key=value` overrides; `value` is parsed as a TOML value and
/// falls back to a plain string.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {o:?} is not of the form section.key=value")))?;
        let key = key.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(key_err(key, "overrides take the form section.key=value"));
        }
        let section = doc
            .entry(parts[0].to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| key_err(parts[0], "is not a section"))?;
        section.insert(parts[1].to_string(), value);
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates every key, resolves paths against `$DATASET_ROOT` (or `base_dir`
    /// when unset) and loads the manifests.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedRun> {
        let root = std::env::var_os(DATASET_ROOT_ENV).map(PathBuf::from);
        self.resolve_with_root(base_dir, root.as_deref())
    }

    pub fn resolve_with_root(&self, base_dir: &Path, dataset_root: Option<&Path>) -> Result<ResolvedRun> {
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                dataset_root.unwrap_or(base_dir).join(p)
            }
        };
        if self.dataset.manifest.as_os_str().is_empty() {
            return Err(key_err("dataset.manifest", "is required"));
        }
        let d = &self.dataset;
        let crop_size = d.crop_size.unwrap_or(224);
        if crop_size == 0 {
            return Err(key_err("dataset.crop_size", "must be >= 1"));
        }
        let short_side = d.short_side.unwrap_or((crop_size as f64 * 256.0 / 224.0).round() as u32);
        if short_side < crop_size {
            return Err(key_err("dataset.short_side", format!("must be >= crop_size ({crop_size})")));
        }
        if d.num_views == Some(0) {
            return Err(key_err("dataset.num_views", "must be >= 1"));
        }

        let m = &self.model;
        let backbone = match m.backbone.unwrap_or(BackboneKind::PretrainedResnet50Class) {
            BackboneKind::PretrainedResnet50Class => {
                if m.stage_channels.is_some() {
                    return Err(key_err("model.stage_channels", "only applies to the toy_cnn backbone"));
                }
                BackboneSpec::resnet50(m.pretrained_weights.is_some())
            }
            BackboneKind::ToyCnn => {
                if m.pretrained_weights.is_some() {
                    return Err(key_err("model.pretrained_weights", "toy_cnn has no pretrained weights"));
                }
                BackboneSpec::toy(m.stage_channels.clone().unwrap_or_else(|| vec![8, 16, 32, 64]))
            }
        };
        wrap("model.backbone", backbone.validate())?;

        let b = &self.binning;
        let binning = BinningConfig { interval: b.w.unwrap_or(0.2), y_min: b.y_min.unwrap_or(0.0), y_max: b.y_max.unwrap_or(1.0) };
        let k = wrap("binning.w", binning.num_categories())?;

        let mut model = ModelConfig::new(backbone, k);
        model.variant = m.variant.unwrap_or(Variant::PmtFull);
        if let Some(p) = m.p {
            if p == 0 {
                return Err(key_err("model.p", "must be >= 1"));
            }
            model.proj_width = p;
        }
        if let Some(w) = &m.reg_widths {
            if w.len() != 3 || w.contains(&0) {
                return Err(key_err("model.reg_widths", format!("needs three positive widths, got {w:?}")));
            }
            model.reg_widths = w.clone();
        }
        if let Some(w) = &m.cls_widths {
            if w.len() != 2 || w.contains(&0) {
                return Err(key_err("model.cls_widths", format!("needs two positive widths, got {w:?}")));
            }
            model.cls_widths = w.clone();
        }
        wrap("model", model.validate())?;

        // a directory stands for its `manifest.csv`
        let manifest_path = |p: &Path| {
            let p = resolve(p);
            if p.is_dir() {
                p.join("manifest.csv")
            } else {
                p
            }
        };
        let manifest = DatasetManifest::load(&manifest_path(&d.manifest))?;
        let test_manifest = d.test_manifest.as_ref().map(|p| DatasetManifest::load(&manifest_path(p))).transpose()?;

        let mut train = TrainConfig::new(&manifest.name);
        let t = &self.train;
        if let Some(v) = t.lr {
            if !(v > 0.0) {
                return Err(key_err("train.lr", format!("must be > 0, got {v}")));
            }
            train.learning_rate = v;
        }
        if let Some(v) = t.batch {
            if v == 0 {
                return Err(key_err("train.batch", "must be >= 1"));
            }
            train.batch_size = v;
        }
        if let Some(v) = t.wd {
            if !(v >= 0.0) {
                return Err(key_err("train.wd", format!("must be >= 0, got {v}")));
            }
            train.weight_decay = v;
        }
        if let Some(v) = t.dropout {
            if !(0.0..1.0).contains(&v) {
                return Err(key_err("train.dropout", format!("must lie in [0, 1), got {v}")));
            }
            train.dropout_rate = v;
        }
        if let Some(v) = t.backbone_lr_mult {
            if !(v >= 0.0) {
                return Err(key_err("train.backbone_lr_mult", format!("must be >= 0, got {v}")));
            }
            train.backbone_lr_mult = v;
        }
        if let Some(v) = t.validation_fraction {
            if !(v > 0.0 && v < 1.0) {
                return Err(key_err("train.validation_fraction", format!("must lie in (0, 1), got {v}")));
            }
            train.validation_fraction = Some(v);
        }
        train.seed = t.seed.unwrap_or(0);
        train.optimizer = t.optimizer.unwrap_or_default();
        train.freeze_backbone = t.freeze_backbone.unwrap_or(false);

        let s = &self.schedule;
        if let Some(v) = s.max_epochs {
            if v == 0 {
                return Err(key_err("schedule.T", "must be >= 1"));
            }
            train.max_epochs = v;
        }
        if let Some(v) = s.xi {
            if !(v > 0.0 && v <= 1.0) {
                return Err(key_err("schedule.xi", format!("must lie in (0, 1], got {v}")));
            }
            train.xi = v;
        }
        if let Some(v) = s.first_epoch {
            if v > 1 {
                return Err(key_err("schedule.first_epoch", "must be 0 or 1"));
            }
            train.first_epoch = v;
        }
        let has_lambdas = s.lambda1.is_some() || s.lambda2.is_some();
        train.schedule = match s.kind {
            None if has_lambdas => return Err(key_err("schedule.lambda1", "requires schedule.kind = \"fixed\"")),
            None => None,
            Some(ScheduleKind::Fixed) => {
                let l1 = s.lambda1.ok_or_else(|| key_err("schedule.lambda1", "required for a fixed schedule"))?;
                let l2 = s.lambda2.unwrap_or(1.0 - l1);
                if !(0.0..=1.0).contains(&l1) || !(0.0..=1.0).contains(&l2) {
                    return Err(key_err("schedule.lambda1", format!("weights must lie in [0, 1], got ({l1}, {l2})")));
                }
                Some(WeightSchedule::Fixed { lambda1: l1, lambda2: l2 })
            }
            Some(_) if has_lambdas => return Err(key_err("schedule.lambda1", "only applies to a fixed schedule")),
            Some(ScheduleKind::Progressive) => Some(WeightSchedule::Progressive { xi: train.xi }),
            Some(ScheduleKind::RegressionOnly) => Some(WeightSchedule::RegressionOnly),
        };
        if let Some(sched) = train.schedule {
            let needs_classifier = !matches!(sched, WeightSchedule::RegressionOnly | WeightSchedule::Fixed { lambda2: 0.0, .. });
            if needs_classifier && !model.variant.has_classifier() {
                return Err(key_err(
                    "schedule.kind",
                    format!("variant {} has no classification head", model.variant),
                ));
            }
        }
        wrap("train", train.validate())?;

        let pr = &self.protocol;
        let protocol = pr.kind.unwrap_or(if test_manifest.is_some() {
            ProtocolKind::CrossDatabase
        } else {
            ProtocolKind::WithinDataset
        });
        let num_runs = pr.num_runs.unwrap_or(10);
        if num_runs == 0 {
            return Err(key_err("protocol.num_runs", "must be >= 1"));
        }
        let train_fraction = pr.train_fraction.unwrap_or(0.8);
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(key_err("protocol.train_fraction", format!("must lie in (0, 1), got {train_fraction}")));
        }
        if protocol == ProtocolKind::CrossDatabase {
            match &test_manifest {
                None => return Err(key_err("dataset.test_manifest", "required for cross_database")),
                Some(tm) if tm.name == manifest.name => {
                    return Err(key_err("dataset.test_manifest", format!("train and test are both {:?}", tm.name)))
                }
                _ => {}
            }
        }

        let setup = TrainSetup {
            num_views: d.num_views.unwrap_or_else(|| manifest.views()),
            train,
            model,
            binning,
            crop_size,
            allow_hflip: d.allow_hflip.unwrap_or(true),
            test_views: d.test_views.unwrap_or_default(),
            precision: m.precision.unwrap_or_default(),
            pretrained_weights: m.pretrained_weights.as_deref().map(|p| base_dir.join(p)),
        };
        if let Some(w) = &setup.pretrained_weights {
            if !w.is_file() {
                return Err(Error::MissingInput { path: w.clone(), reason: "pretrained weight file not found".into() });
            }
        }
        setup.validate()?;
        Ok(ResolvedRun {
            setup,
            manifest,
            test_manifest,
            resize: ResizePolicy { crop_size, short_side },
            protocol,
            options: ProtocolOptions { num_runs, train_fraction, track_curves: pr.track_curves.unwrap_or(false) },
        })
    }
}
