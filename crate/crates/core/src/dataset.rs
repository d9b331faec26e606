//! Dataset manifests, score scaling, train/test splits and crop/flip augmentation.
//!
//! A dataset is a `path,score` CSV plus a TOML sidecar with the same stem that
//! carries the name, score polarity, raw score range and the augmentation count.
//! Image paths in the CSV are relative to the CSV's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePolarity {
    /// MOS-style scores.
    HigherIsBetter,
    /// DMOS-style scores.
    LowerIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "path")]
    pub image_path: String,
    #[serde(rename = "score")]
    pub raw_score: f64,
}

/// Contents of the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub name: String,
    pub polarity: ScorePolarity,
    pub raw_min: f64,
    pub raw_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_views: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub polarity: ScorePolarity,
    pub raw_min: f64,
    pub raw_max: f64,
    pub num_views: Option<usize>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

/// Sidecar path for a manifest CSV: same stem, `.toml` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("toml")
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidManifest { name: self.name.clone(), reason };
        if self.entries.is_empty() {
            return Err(bad("manifest has no entries".into()));
        }
        if !(self.raw_min < self.raw_max) {
            return Err(Error::DegenerateRange { min: self.raw_min, max: self.raw_max });
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !(self.raw_min..=self.raw_max).contains(&e.raw_score) {
                return Err(bad(format!(
                    "score {} of {} outside [{}, {}]",
                    e.raw_score, e.image_path, self.raw_min, self.raw_max
                )));
            }
            if !seen.insert(e.image_path.as_str()) {
                return Err(bad(format!("duplicate image path {}", e.image_path)));
            }
        }
        if self.num_views == Some(0) {
            return Err(bad("num_views must be >= 1".into()));
        }
        Ok(())
    }

    /// Reads `<stem>.csv` and its `<stem>.toml` sidecar.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let missing = |p: &Path, e: &dyn std::fmt::Display| Error::MissingInput {
            path: p.to_path_buf(),
            reason: e.to_string(),
        };
        let side_path = sidecar_path(csv_path);
        let side_text = fs::read_to_string(&side_path).map_err(|e| missing(&side_path, &e))?;
        let sidecar: DatasetSidecar = toml::from_str(&side_text).map_err(|e| Error::InvalidManifest {
            name: side_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let file = fs::File::open(csv_path).map_err(|e| missing(csv_path, &e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["path", "score"] {
            return Err(Error::InvalidManifest {
                name: sidecar.name,
                reason: format!("expected header `path,score`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let manifest = Self {
            name: sidecar.name,
            entries,
            polarity: sidecar.polarity,
            raw_min: sidecar.raw_min,
            raw_max: sidecar.raw_max,
            num_views: sidecar.num_views,
            root: csv_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Writes `<stem>.csv` and `<stem>.toml`.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(csv_path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        let sidecar = DatasetSidecar {
            name: self.name.clone(),
            polarity: self.polarity,
            raw_min: self.raw_min,
            raw_max: self.raw_max,
            num_views: self.num_views,
        };
        let text = toml::to_string(&sidecar).map_err(|e| Error::config(e.to_string()))?;
        fs::write(sidecar_path(csv_path), text)?;
        Ok(())
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    pub fn scaler(&self) -> Result<ScoreScaler> {
        ScoreScaler::new(self.raw_min, self.raw_max, self.polarity)
    }

    /// Views per image: the sidecar value, else the dataset default.
    pub fn views(&self) -> usize {
        self.num_views.unwrap_or_else(|| default_num_views(&self.name))
    }
}

/// Ten augmented views for LIVE Challenge, five elsewhere.
pub fn default_num_views(dataset: &str) -> usize {
    let key: String = dataset.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    if key == "livec" || key == "livechallenge" {
        10
    } else {
        5
    }
}

/// Affine map of raw scores onto `[0, 1]`, 1 always meaning best quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScaler {
    pub raw_min: f64,
    pub raw_max: f64,
    pub polarity: ScorePolarity,
}

impl ScoreScaler {
    pub fn new(raw_min: f64, raw_max: f64, polarity: ScorePolarity) -> Result<Self> {
        if !(raw_min < raw_max) {
            return Err(Error::DegenerateRange { min: raw_min, max: raw_max });
        }
        Ok(Self { raw_min, raw_max, polarity })
    }

    pub fn scale(&self, raw: f64) -> f64 {
        let u = (raw - self.raw_min) / (self.raw_max - self.raw_min);
        match self.polarity {
            ScorePolarity::HigherIsBetter => u,
            ScorePolarity::LowerIsBetter => 1.0 - u,
        }
    }
}

pub fn scale_scores(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    let scaler = manifest.scaler()?;
    Ok(manifest.entries.iter().map(|e| scaler.scale(e.raw_score)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Arc<RgbImage>,
    pub scaled_score: f64,
    pub split: Split,
    pub source_path: String,
    /// Name of the dataset the image came from.
    pub dataset: String,
}

/// How images smaller than the crop are handled before cropping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizePolicy {
    pub crop_size: u32,
    /// Images whose short side is below `crop_size` are resized so it equals this.
    pub short_side: u32,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        Self { crop_size: 224, short_side: 256 }
    }
}

impl ResizePolicy {
    pub fn apply(&self, img: RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        if w.min(h) >= self.crop_size {
            return img;
        }
        let scale = self.short_side as f64 / w.min(h) as f64;
        let long = |side: u32| ((side as f64 * scale).round() as u32).max(self.short_side);
        let (nw, nh) = if w <= h { (self.short_side, long(h)) } else { (long(w), self.short_side) };
        imageops::resize(&img, nw, nh, imageops::FilterType::Triangle)
    }
}

pub fn load_image(path: &Path, policy: &ResizePolicy) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidImage { path: path.display().to_string(), reason: e.to_string() })?
        .to_rgb8();
    let img = policy.apply(img);
    let (w, h) = img.dimensions();
    if w < policy.crop_size || h < policy.crop_size {
        return Err(Error::InvalidImage {
            path: path.display().to_string(),
            reason: format!("{w}×{h} is smaller than the {} crop", policy.crop_size),
        });
    }
    Ok(img)
}

/// A manifest with every image decoded and every score scaled.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<ImageSample>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, policy: &ResizePolicy) -> Result<Self> {
        manifest.validate()?;
        let scores = scale_scores(&manifest)?;
        let samples = manifest
            .entries
            .iter()
            .zip(scores)
            .map(|(e, s)| {
                Ok(ImageSample {
                    image: Arc::new(load_image(&manifest.image_path(e), policy)?),
                    scaled_score: s,
                    split: Split::Train,
                    source_path: e.image_path.clone(),
                    dataset: manifest.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All samples tagged with `split`.
    pub fn all_as(&self, split: Split) -> Vec<ImageSample> {
        self.samples.iter().cloned().map(|s| ImageSample { split, ..s }).collect()
    }
}

/// Shuffled index partition; `|train| = round(fraction·n)` clamped to `1..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("cannot split {n} samples into train and test")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split_dataset(
    dataset: &LoadedDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let (tr, te) = split_indices(dataset.len(), train_fraction, seed)?;
    let pick = |idx: &[usize], split: Split| -> Vec<ImageSample> {
        idx.iter().map(|&i| ImageSample { split, ..dataset.samples[i].clone() }).collect()
    };
    Ok((pick(&tr, Split::Train), pick(&te, Split::Test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub crop_size: u32,
    pub num_views: usize,
    pub allow_hflip: bool,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn for_dataset(name: &str, crop_size: u32, seed: u64) -> Self {
        Self { crop_size, num_views: default_num_views(name), allow_hflip: true, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 || self.crop_size == 0 {
            return Err(Error::config("augmentation needs num_views >= 1 and crop_size > 0"));
        }
        Ok(())
    }
}

/// Placement of one crop and whether it is mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub flip: bool,
}

/// Crop windows for an image of the given size, drawn from `spec.seed`.
pub fn crop_plan(width: u32, height: u32, spec: &AugmentationSpec) -> Result<Vec<CropWindow>> {
    spec.validate()?;
    if width < spec.crop_size || height < spec.crop_size {
        return Err(Error::InvalidImage {
            path: String::new(),
            reason: format!("{width}×{height} is smaller than the {} crop", spec.crop_size),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.num_views)
        .map(|_| {
            let x = rng.random_range(0..=width - spec.crop_size);
            let y = rng.random_range(0..=height - spec.crop_size);
            let flip = spec.allow_hflip && rng.random_bool(0.5);
            CropWindow { x, y, flip }
        })
        .collect())
}

pub fn apply_crop(image: &RgbImage, window: CropWindow, size: u32) -> RgbImage {
    let crop = imageops::crop_imm(image, window.x, window.y, size, size).to_image();
    if window.flip {
        imageops::flip_horizontal(&crop)
    } else {
        crop
    }
}

/// `num_views` random crops, each mirrored with probability ½; views keep the score.
pub fn augment(sample: &ImageSample, spec: &AugmentationSpec) -> Result<Vec<ImageSample>> {
    let (w, h) = sample.image.dimensions();
    let plan = crop_plan(w, h, spec).map_err(|e| match e {
        Error::InvalidImage { reason, .. } => Error::InvalidImage { path: sample.source_path.clone(), reason },
        other => other,
    })?;
    Ok(plan
        .into_iter()
        .map(|win| ImageSample { image: Arc::new(apply_crop(&sample.image, win, spec.crop_size)), ..sample.clone() })
        .collect())
}

/// Single centered crop.
pub fn center_crop(sample: &ImageSample, crop_size: u32) -> Result<ImageSample> {
    let (w, h) = sample.image.dimensions();
    if w < crop_size || h < crop_size {
        return Err(Error::InvalidImage {
            path: sample.source_path.clone(),
            reason: format!("{w}×{h} is smaller than the {crop_size} crop"),
        });
    }
    let win = CropWindow { x: (w - crop_size) / 2, y: (h - crop_size) / 2, flip: false };
    Ok(ImageSample { image: Arc::new(apply_crop(&sample.image, win, crop_size)), ..sample.clone() })
}

/// Which views are scored at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestViews {
    /// Same random crop count as training; predictions averaged per image.
    #[default]
    MultiCrop,
    Center,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks equally sized RGB images into a normalized `B×3×H×W` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("no images to batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::shape(format!("batch mixes {:?} and {:?} images", (w, h), img.dimensions())));
        }
        let base = b * 3 * plane;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}
