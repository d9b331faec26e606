//! Discretization of scalar quality scores into `K` quality levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interval width `w` over `[y_min, y_max]`; `K = floor(|y_max - y_min| / w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub interval: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self { interval: 0.2, y_min: 0.0, y_max: 1.0 }
    }
}

impl BinningConfig {
    pub fn new(interval: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let cfg = Self { interval, y_min, y_max };
        cfg.num_categories()?;
        Ok(cfg)
    }

    /// Interval width `w` over the unit range of scaled scores.
    pub fn unit(interval: f64) -> Result<Self> {
        Self::new(interval, 0.0, 1.0)
    }

    pub fn num_categories(&self) -> Result<usize> {
        num_categories(self)
    }

    pub fn to_level(&self, score: f64) -> Result<usize> {
        to_level(score, self)
    }

    /// Lower edge of level `c` (1-based).
    pub fn boundary(&self, c: usize) -> f64 {
        self.y_min + (c as f64 - 1.0) * self.interval
    }
}

pub fn num_categories(cfg: &BinningConfig) -> Result<usize> {
    if !(cfg.interval > 0.0) || !cfg.interval.is_finite() {
        return Err(Error::config(format!("binning interval w must be > 0, got {}", cfg.interval)));
    }
    if !(cfg.y_min < cfg.y_max) {
        return Err(Error::config(format!(
            "binning range [{}, {}] is empty",
            cfg.y_min, cfg.y_max
        )));
    }
    let k = ((cfg.y_max - cfg.y_min).abs() / cfg.interval).floor();
    if k < 2.0 {
        return Err(Error::config(format!(
            "binning with w={} over [{}, {}] yields {k} categories; need at least 2",
            cfg.interval, cfg.y_min, cfg.y_max
        )));
    }
    Ok(k as usize)
}

/// Level `c ∈ 1..=K` with `score ∈ [y_min + (c-1)w, y_min + cw)`; the last level is
/// closed at `y_max` and absorbs any remainder beyond `K·w`.
pub fn to_level(score: f64, cfg: &BinningConfig) -> Result<usize> {
    let k = num_categories(cfg)?;
    if !(cfg.y_min..=cfg.y_max).contains(&score) {
        return Err(Error::OutOfRange(format!(
            "score {score} outside [{}, {}]",
            cfg.y_min, cfg.y_max
        )));
    }
    // Zero-based interval index, then nudged so membership agrees exactly with the
    // boundaries `y_min + c·w` as computed in floating point.
    let mut c = (((score - cfg.y_min) / cfg.interval).floor() as usize).min(k - 1);
    while c + 1 < k && score >= cfg.boundary(c + 2) {
        c += 1;
    }
    while c > 0 && score < cfg.boundary(c + 1) {
        c -= 1;
    }
    Ok(c + 1)
}

pub fn to_one_hot(level: usize, k: usize) -> Result<Vec<f64>> {
    if level < 1 || level > k {
        return Err(Error::OutOfRange(format!("level {level} outside 1..={k}")));
    }
    let mut v = vec![0.0; k];
    v[level - 1] = 1.0;
    Ok(v)
}
