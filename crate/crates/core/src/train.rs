//! Joint optimization of the backbone, projections and heads under the scheduled
//! objective, and inference with per-image view averaging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binning::{to_one_hot, BinningConfig};
use crate::checkpoint::Checkpoint;
use crate::dataset::{augment, center_crop, images_to_tensor, split_indices, AugmentationSpec, ImageSample, TestViews};
use crate::error::{Error, Result};
use crate::metrics::{Correlation, PairedScores};
use crate::model::{ModelConfig, PmtModel, Variant};
use crate::nn::Mode;
use crate::objective::{combined_loss, ClassOutput, WeightSchedule};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub xi: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub dataset: String,
    pub optimizer: OptimizerKind,
    /// Index of the first epoch fed to the schedule (0 or 1).
    pub first_epoch: usize,
    pub backbone_lr_mult: f64,
    pub freeze_backbone: bool,
    /// Fraction of the training set held out for best-checkpoint selection.
    pub validation_fraction: Option<f64>,
    /// Overrides the schedule implied by the model variant.
    pub schedule: Option<WeightSchedule>,
}

impl TrainConfig {
    pub fn new(dataset: &str) -> Self {
        let (learning_rate, batch_size, xi) = tuned_defaults(dataset);
        Self {
            learning_rate,
            batch_size,
            max_epochs: 100,
            xi,
            weight_decay: 1e-4,
            dropout_rate: 0.1,
            seed: 0,
            dataset: dataset.to_string(),
            optimizer: OptimizerKind::Adam,
            first_epoch: 0,
            backbone_lr_mult: 1.0,
            freeze_backbone: false,
            validation_fraction: None,
            schedule: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.first_epoch > 1 {
            return Err(Error::config("first_epoch must be 0 or 1"));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::config(format!("xi must lie in (0, 1], got {}", self.xi)));
        }
        if self.weight_decay < 0.0 || !(self.backbone_lr_mult >= 0.0) {
            return Err(Error::config("weight_decay and backbone_lr_mult must be >= 0"));
        }
        if let Some(v) = self.validation_fraction {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("validation_fraction must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, variant: Variant) -> WeightSchedule {
        self.schedule.unwrap_or(match variant {
            Variant::PmtFull => WeightSchedule::Progressive { xi: self.xi },
            Variant::Type2 => WeightSchedule::Fixed { lambda1: 0.5, lambda2: 0.5 },
            Variant::Type1 | Variant::ResnetOnly => WeightSchedule::RegressionOnly,
        })
    }
}

/// Learning rate, batch size and ξ tuned per dataset; other datasets get
/// `(3e-4, 12, 0.95)`.
pub fn tuned_defaults(dataset: &str) -> (f64, usize, f64) {
    let key: String = dataset.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    match key.as_str() {
        "bid" => (1.09e-4, 12, 0.9419),
        "livec" | "livechallenge" => (4.72e-4, 12, 0.9841),
        "live" => (3.23e-4, 12, 0.9941),
        "csiq" => (4.72e-4, 12, 0.8931),
        _ => (3e-4, 12, 0.95),
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub binning: BinningConfig,
    pub crop_size: u32,
    pub num_views: usize,
    pub allow_hflip: bool,
    pub test_views: TestViews,
    pub precision: Precision,
    pub pretrained_weights: Option<PathBuf>,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        let k = self.binning.num_categories()?;
        if self.model.variant.has_classifier() && k != self.model.num_classes {
            return Err(Error::config(format!(
                "binning yields K={k} levels but the classifier has {} outputs",
                self.model.num_classes
            )));
        }
        if self.num_views == 0 || self.crop_size == 0 {
            return Err(Error::config("num_views and crop_size must be >= 1"));
        }
        if self.model.backbone.pretrained && self.pretrained_weights.is_none() {
            return Err(Error::config("pretrained backbone requested but no weight file given"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("setup serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn view_policy(&self) -> ViewPolicy {
        ViewPolicy { crop_size: self.crop_size, num_views: self.num_views, mode: self.test_views, seed: self.train.seed }
    }

    pub fn build_model(&self, device: &Device) -> Result<PmtModel> {
        let model = PmtModel::new(&self.model, self.precision.dtype(), device, mix(self.train.seed, &[TAG_INIT]))?;
        if let Some(path) = &self.pretrained_weights {
            model.load_backbone_weights(path)?;
        }
        Ok(model)
    }
}

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_VIEW: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_TEST: u64 = 5;
const TAG_VALIDATION: u64 = 6;

/// Derives an independent stream seed from a base seed and a tag path.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn path_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss_r: f64,
    /// Absent for variants without a classification head.
    pub loss_c: Option<f64>,
    pub loss_total: f64,
}

/// Correlations on a monitored set after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub srcc: f64,
    pub plcc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval: Vec<EpochEval>,
}

impl TrainingLog {
    /// CSV with columns `epoch,lambda1,lambda2,loss_r,loss_c,loss_total`, preceded
    /// by `# key=value` header lines.
    pub fn write_csv(&self, path: &Path, header: &[(String, String)]) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (k, v) in header {
            writeln!(f, "# {k}={v}")?;
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<(String, String)>, Vec<EpochRecord>)> {
        let text = std::fs::read_to_string(path)?;
        let header = text
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok((header, rows))
    }
}

/// How test-time views are produced for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPolicy {
    pub crop_size: u32,
    pub num_views: usize,
    pub mode: TestViews,
    pub seed: u64,
}

impl ViewPolicy {
    /// Views for `sample`; crop positions depend on the image path, not its position
    /// in a batch.
    pub fn views(&self, sample: &ImageSample) -> Result<Vec<Arc<RgbImage>>> {
        Ok(match self.mode {
            TestViews::Center => vec![center_crop(sample, self.crop_size)?.image],
            TestViews::MultiCrop => {
                let spec = AugmentationSpec {
                    crop_size: self.crop_size,
                    num_views: self.num_views,
                    allow_hflip: true,
                    seed: mix(self.seed, &[TAG_TEST, path_hash(&sample.source_path)]),
                };
                augment(sample, &spec)?.into_iter().map(|v| v.image).collect()
            }
        })
    }
}

const EVAL_BATCH: usize = 32;

/// Mean regression-head output over each image's views.
pub fn predict(model: &PmtModel, samples: &[ImageSample], policy: &ViewPolicy) -> Result<Vec<f64>> {
    let store = model.store();
    let mut views: Vec<(usize, Arc<RgbImage>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        views.extend(policy.views(s)?.into_iter().map(|v| (i, v)));
    }
    let mut sums = vec![0.0; samples.len()];
    let mut counts = vec![0usize; samples.len()];
    for chunk in views.chunks(EVAL_BATCH) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|(_, v)| v.as_ref()).collect();
        let x = images_to_tensor(&imgs, store.dtype(), store.device())?;
        let out = model.forward(&x, &mut Mode::Eval)?;
        let scores = out.score.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for ((i, _), s) in chunk.iter().zip(scores) {
            sums[*i] += s;
            counts[*i] += 1;
        }
    }
    Ok(sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect())
}

pub fn evaluate(model: &PmtModel, samples: &[ImageSample], policy: &ViewPolicy) -> Result<Correlation> {
    let pred = predict(model, samples, policy)?;
    let truth = samples.iter().map(|s| s.scaled_score).collect();
    Correlation::evaluate(&PairedScores::new(truth, pred)?)
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: PmtModel,
    pub checkpoint: Checkpoint,
    /// Best-on-validation checkpoint and its validation SRCC, when a validation
    /// fraction is configured.
    pub best: Option<(Checkpoint, f64)>,
    pub log: TrainingLog,
}

/// Optional hooks into the epoch loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Evaluated with the test-time view policy after every epoch.
    pub monitor: Option<&'a [ImageSample]>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

struct Item {
    image: Arc<RgbImage>,
    score: f64,
    level: usize,
}

pub fn train(samples: &[ImageSample], setup: &TrainSetup, mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    setup.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let cfg = &setup.train;
    let device = Device::Cpu;
    let model = setup.build_model(&device)?;
    let store = model.store();
    let dtype = store.dtype();
    let k = setup.binning.num_categories()?;
    let schedule = cfg.schedule_for(setup.model.variant);

    let (fit, validation): (Vec<ImageSample>, Vec<ImageSample>) = match cfg.validation_fraction {
        Some(vf) => {
            let (tr, va) = split_indices(samples.len(), 1.0 - vf, mix(cfg.seed, &[TAG_VALIDATION]))?;
            (tr.iter().map(|&i| samples[i].clone()).collect(), va.iter().map(|&i| samples[i].clone()).collect())
        }
        None => (samples.to_vec(), Vec::new()),
    };
    let levels = fit
        .iter()
        .map(|s| setup.binning.to_level(s.scaled_score.clamp(setup.binning.y_min, setup.binning.y_max)))
        .collect::<Result<Vec<_>>>()?;

    let mut adam_cfg = AdamConfig::new(cfg.learning_rate, cfg.weight_decay);
    adam_cfg.backbone_lr_mult = cfg.backbone_lr_mult;
    adam_cfg.freeze_backbone = cfg.freeze_backbone;
    let mut opt = Adam::new(adam_cfg);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[TAG_DROPOUT]));
    let policy = setup.view_policy();
    let mut log = TrainingLog::default();
    let mut best: Option<(Checkpoint, f64)> = None;
    let mut state = schedule.state(cfg.first_epoch, cfg.max_epochs)?;

    for e in 0..cfg.max_epochs {
        let t = cfg.first_epoch + e;
        state = schedule.state(t, cfg.max_epochs)?;

        let mut items = Vec::with_capacity(fit.len() * setup.num_views);
        for (i, s) in fit.iter().enumerate() {
            let spec = AugmentationSpec {
                crop_size: setup.crop_size,
                num_views: setup.num_views,
                allow_hflip: setup.allow_hflip,
                seed: mix(cfg.seed, &[TAG_VIEW, e as u64, i as u64]),
            };
            items.extend(augment(s, &spec)?.into_iter().map(|v| Item { image: v.image, score: v.scaled_score, level: levels[i] }));
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[TAG_EPOCH, e as u64])));

        let (mut sum_r, mut sum_c, mut sum_t, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in items.chunks(cfg.batch_size) {
            let imgs: Vec<&RgbImage> = batch.iter().map(|it| it.image.as_ref()).collect();
            let x = images_to_tensor(&imgs, dtype, &device)?;
            let b = batch.len();
            let target = Tensor::from_vec(batch.iter().map(|it| it.score).collect::<Vec<_>>(), (b, 1), &device)?.to_dtype(dtype)?;
            let mut mode = Mode::Train { dropout: cfg.dropout_rate, rng: &mut dropout_rng };
            let out = model.forward(&x, &mut mode)?;
            let one_hot = match out.logits {
                Some(_) => {
                    let mut v = Vec::with_capacity(b * k);
                    for it in batch {
                        v.extend(to_one_hot(it.level, k)?);
                    }
                    Some(Tensor::from_vec(v, (b, k), &device)?.to_dtype(dtype)?)
                }
                None => None,
            };
            let parts = combined_loss(&out.score, out.logits.as_ref().map(ClassOutput::Logits), &target, one_hot.as_ref(), &state)?;
            let total = scalar(&parts.total)?;
            if !total.is_finite() {
                return Err(Error::Divergence { epoch: t, loss: total });
            }
            let grads = parts.total.backward()?;
            opt.step(store, &grads)?;
            sum_r += scalar(&parts.regression)? * b as f64;
            if let Some(c) = &parts.classification {
                sum_c += scalar(c)? * b as f64;
            }
            sum_t += total * b as f64;
            seen += b;
        }
        let n = seen as f64;
        let record = EpochRecord {
            epoch: t,
            lambda1: state.lambda1,
            lambda2: state.lambda2,
            loss_r: sum_r / n,
            loss_c: setup.model.variant.has_classifier().then_some(sum_c / n),
            loss_total: sum_t / n,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        log.rows.push(record);

        if let Some(monitor) = hooks.monitor {
            let c = evaluate(&model, monitor, &policy)?;
            log.eval.push(EpochEval { epoch: t, srcc: c.srcc, plcc: c.plcc });
        }
        if !validation.is_empty() {
            let c = evaluate(&model, &validation, &policy)?;
            if best.as_ref().is_none_or(|(_, s)| c.srcc > *s) {
                best = Some((Checkpoint::capture(&model, &opt, setup, e + 1, state)?, c.srcc));
            }
        }
    }

    let checkpoint = Checkpoint::capture(&model, &opt, setup, cfg.max_epochs, state)?;
    Ok(TrainOutcome { model, checkpoint, best, log })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Snapshot of every stored tensor (deep copies).
pub(crate) fn snapshot(tensors: BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    tensors.into_iter().map(|(k, v)| Ok((k, v.detach().copy()?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        assert_eq!(tuned_defaults("BID"), (1.09e-4, 12, 0.9419));
        assert_eq!(tuned_defaults("LIVE-C"), (4.72e-4, 12, 0.9841));
        assert_eq!(tuned_defaults("live"), (3.23e-4, 12, 0.9941));
        assert_eq!(tuned_defaults("CSIQ"), (4.72e-4, 12, 0.8931));
        assert_eq!(tuned_defaults("other").2, 0.95);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::new("bid");
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { dropout_rate: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: Some(1.0), ..ok }.validate().is_err());
    }

    #[test]
    fn variant_schedules() {
        let c = TrainConfig::new("bid");
        assert_eq!(c.schedule_for(Variant::PmtFull), WeightSchedule::Progressive { xi: 0.9419 });
        assert_eq!(c.schedule_for(Variant::Type2), WeightSchedule::Fixed { lambda1: 0.5, lambda2: 0.5 });
        assert_eq!(c.schedule_for(Variant::Type1), WeightSchedule::RegressionOnly);
    }

    #[test]
    fn mixing_separates_streams() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
        assert_ne!(mix(1, &[2]), mix(2, &[2]));
        assert_eq!(mix(5, &[1, 2]), mix(5, &[1, 2]));
    }
}
