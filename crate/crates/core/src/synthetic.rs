//! Procedural stand-in datasets: random textured images degraded at a known
//! severity, with quality `1 - severity / max_severity`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestEntry, ScorePolarity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    GaussianNoise,
    JpegLike,
}

impl Distortion {
    pub fn name(self) -> &'static str {
        match self {
            Distortion::GaussianBlur => "gaussian_blur",
            Distortion::GaussianNoise => "gaussian_noise",
            Distortion::JpegLike => "jpeg_like",
        }
    }
}

impl std::str::FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" => Ok(Distortion::GaussianBlur),
            "gaussian_noise" | "noise" => Ok(Distortion::GaussianNoise),
            "jpeg_like" | "jpeg" => Ok(Distortion::JpegLike),
            other => Err(Error::config(format!("unknown distortion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub num_images: usize,
    pub image_size: u32,
    pub distortion: Distortion,
    /// Number of severity levels, including the pristine level 0.
    pub severity_levels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_images: usize, image_size: u32, distortion: Distortion, seed: u64) -> Self {
        Self {
            name: format!("synthetic_{}", distortion.name()),
            num_images,
            image_size,
            distortion,
            severity_levels: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_images < 1 {
            return Err(Error::config("synthetic dataset needs at least one image"));
        }
        if self.image_size < 8 {
            return Err(Error::config(format!("image size must be >= 8, got {}", self.image_size)));
        }
        if self.severity_levels < 2 {
            return Err(Error::config("need at least 2 severity levels"));
        }
        Ok(())
    }

    pub fn max_severity(&self) -> usize {
        self.severity_levels - 1
    }

    /// Ground-truth quality of a severity level.
    pub fn score(&self, severity: usize) -> f64 {
        1.0 - severity as f64 / self.max_severity() as f64
    }
}

/// A random composition of a color gradient, a sinusoidal grating and shapes.
fn base_image(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = rng.random_range(0.15..0.6);
    let amp = rng.random_range(15.0..45.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let s = size as f64;
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 / s, y as f64 / s);
        let g = 0.5 * (fx + fy);
        let wave = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
        Rgb(std::array::from_fn(|c| (c0[c] * (1.0 - g) + c1[c] * g + wave).clamp(0.0, 255.0) as u8))
    });
    for _ in 0..rng.random_range(3..8) {
        let color = Rgb(std::array::from_fn(|_| rng.random_range(0..=255u8)));
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(s * 0.05..s * 0.25);
        let square = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if square { dx.abs() < r && dy.abs() < r } else { dx * dx + dy * dy < r * r };
                if inside {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

fn distort(img: &RgbImage, kind: Distortion, severity: usize, max: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    if severity == 0 {
        return Ok(img.clone());
    }
    let frac = severity as f64 / max as f64;
    Ok(match kind {
        Distortion::GaussianBlur => imageops::blur(img, (3.0 * frac) as f32),
        Distortion::GaussianNoise => {
            let normal = Normal::new(0.0, 40.0 * frac).map_err(|e| Error::config(e.to_string()))?;
            let mut out = img.clone();
            for px in out.pixels_mut() {
                for c in 0..3 {
                    px[c] = (px[c] as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
                }
            }
            out
        }
        Distortion::JpegLike => {
            let quality = (95.0 - 90.0 * frac).round() as u8;
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality).encode_image(img)?;
            image::load_from_memory(&buf)?.to_rgb8()
        }
    })
}

/// Writes PNG images plus `manifest.csv`/`manifest.toml` under `out_dir` and
/// returns the manifest with the CSV path.
pub fn make_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // every severity appears; assignment order is shuffled
    let mut severities: Vec<usize> = (0..spec.num_images).map(|i| i % spec.severity_levels).collect();
    severities.shuffle(&mut rng);
    let mut entries = Vec::with_capacity(spec.num_images);
    for (i, &sev) in severities.iter().enumerate() {
        let base = base_image(spec.image_size, &mut rng);
        let img = distort(&base, spec.distortion, sev, spec.max_severity(), &mut rng)?;
        let file = format!("img_{i:04}.png");
        img.save(out_dir.join(&file))?;
        entries.push(ManifestEntry { image_path: file, raw_score: spec.score(sev) });
    }
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        entries,
        polarity: ScorePolarity::HigherIsBetter,
        raw_min: 0.0,
        raw_max: 1.0,
        num_views: None,
        root: out_dir.to_path_buf(),
    };
    let csv_path = out_dir.join("manifest.csv");
    manifest.save(&csv_path)?;
    Ok((manifest, csv_path))
}
