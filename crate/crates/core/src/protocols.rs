//! Experiment protocols: repeated within-dataset splits, cross-dataset transfer,
//! and the four-variant ablation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{split_dataset, ImageSample, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{lower_median, Correlation};
use crate::model::{ablation_configs, Variant};
use crate::train::{evaluate, train, TrainHooks, TrainSetup, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    WithinDataset,
    CrossDatabase,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_dataset: String,
    pub test_dataset: String,
    pub num_runs: usize,
    pub variant: Variant,
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_runs < 1 {
            return Err(Error::config("a protocol needs at least one run"));
        }
        match self.kind {
            ProtocolKind::WithinDataset | ProtocolKind::Ablation if self.train_dataset != self.test_dataset => {
                Err(Error::config(format!(
                    "within-dataset protocols train and test on one dataset, got {} and {}",
                    self.train_dataset, self.test_dataset
                )))
            }
            ProtocolKind::CrossDatabase if self.train_dataset == self.test_dataset => Err(Error::config(format!(
                "cross-database test needs distinct datasets, got {} twice",
                self.train_dataset
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub srcc: f64,
    pub plcc: f64,
}

/// Training curves of one run, kept for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub seed: u64,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub params: usize,
    pub reg_widths: Vec<usize>,
    pub runs: Vec<RunResult>,
    pub median: Correlation,
    /// `(λ1, λ2)` per epoch of the first run.
    pub lambdas: Vec<(f64, f64)>,
}

/// Published figures for the same dataset or transfer pair, for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub srcc: f64,
    pub plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub train_dataset: String,
    pub test_dataset: String,
    pub config_fingerprint: String,
    pub runs: Vec<RunResult>,
    pub median: Option<Correlation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<VariantResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<RunCurve>,
}

impl EvalReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Element-wise lower median of the run rows.
pub fn median_of_runs(runs: &[RunResult]) -> Result<Correlation> {
    let s: Vec<f64> = runs.iter().map(|r| r.srcc).collect();
    let p: Vec<f64> = runs.iter().map(|r| r.plcc).collect();
    Ok(Correlation { srcc: lower_median(&s)?, plcc: lower_median(&p)? })
}

fn normalize(name: &str) -> String {
    name.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

/// Published median SRCC/PLCC of the full method on the four public datasets.
pub fn within_reference(dataset: &str) -> Option<Reference> {
    let (srcc, plcc) = match normalize(dataset).as_str() {
        "bid" => (0.874, 0.894),
        "livec" | "livechallenge" => (0.866, 0.893),
        "live" => (0.969, 0.971),
        "csiq" => (0.949, 0.951),
        _ => return None,
    };
    Some(Reference { srcc, plcc: Some(plcc) })
}

/// Published cross-dataset SRCC of the full method.
pub fn cross_reference(train: &str, test: &str) -> Option<Reference> {
    let srcc = match (normalize(train).as_str(), normalize(test).as_str()) {
        ("livec", "bid") => 0.897,
        ("bid", "livec") => 0.782,
        ("live", "csiq") => 0.766,
        ("csiq", "live") => 0.934,
        _ => return None,
    };
    Some(Reference { srcc, plcc: None })
}

/// Options shared by every protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOptions {
    pub num_runs: usize,
    pub train_fraction: f64,
    /// Record test-set SRCC/PLCC after every epoch (for curve plots).
    pub track_curves: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self { num_runs: 10, train_fraction: 0.8, track_curves: false }
    }
}

fn run_seed(setup: &TrainSetup, run: usize) -> u64 {
    setup.train.seed.wrapping_add(run as u64)
}

fn seeded(setup: &TrainSetup, seed: u64) -> TrainSetup {
    let mut s = setup.clone();
    s.train.seed = seed;
    s
}

/// `num_runs` independent split/train/test cycles; each run re-draws the split and
/// the initialization.
pub fn run_within(dataset: &LoadedDataset, setup: &TrainSetup, opts: &ProtocolOptions) -> Result<EvalReport> {
    let spec = ProtocolSpec {
        kind: ProtocolKind::WithinDataset,
        train_dataset: dataset.name().to_string(),
        test_dataset: dataset.name().to_string(),
        num_runs: opts.num_runs,
        variant: setup.model.variant,
    };
    spec.validate()?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for r in 0..opts.num_runs {
        let seed = run_seed(setup, r);
        let (train_set, test_set) = split_dataset(dataset, opts.train_fraction, seed)?;
        let s = seeded(setup, seed);
        let hooks = TrainHooks { monitor: opts.track_curves.then_some(test_set.as_slice()), on_epoch: None };
        let outcome = train(&train_set, &s, hooks)?;
        let model = match &outcome.best {
            Some((ckpt, _)) => ckpt.to_model(outcome.model.store().device())?,
            None => outcome.model,
        };
        let c = evaluate(&model, &test_set, &s.view_policy())?;
        runs.push(RunResult { seed, srcc: c.srcc, plcc: c.plcc });
        if opts.track_curves {
            curves.push(RunCurve { seed, log: outcome.log });
        }
    }
    Ok(EvalReport {
        protocol: ProtocolKind::WithinDataset,
        train_dataset: spec.train_dataset,
        test_dataset: spec.test_dataset,
        config_fingerprint: setup.fingerprint(),
        median: Some(median_of_runs(&runs)?),
        runs,
        variants: None,
        params: Some(setup.model.param_count()),
        reference: within_reference(dataset.name()),
        curves,
    })
}

/// Fails if any training sample is tagged with the test dataset, is not a
/// training split, or resolves to an image file of the test dataset.
pub fn audit_provenance(train_ds: &LoadedDataset, train_set: &[ImageSample], test: &LoadedDataset) -> Result<()> {
    let canon = |p: std::path::PathBuf| p.canonicalize().unwrap_or(p);
    let test_paths: HashSet<_> = test.manifest.entries.iter().map(|e| canon(test.manifest.image_path(e))).collect();
    for s in train_set {
        if s.dataset == test.name() || s.split != Split::Train {
            return Err(Error::config(format!("training sample {} is tagged {}/{:?}", s.source_path, s.dataset, s.split)));
        }
        if test_paths.contains(&canon(train_ds.manifest.root.join(&s.source_path))) {
            return Err(Error::config(format!("training image {} also belongs to {}", s.source_path, test.name())));
        }
    }
    Ok(())
}

/// Trains on all of `train_ds` and scores all of `test_ds`.
pub fn run_cross(train_ds: &LoadedDataset, test_ds: &LoadedDataset, setup: &TrainSetup, opts: &ProtocolOptions) -> Result<EvalReport> {
    let spec = ProtocolSpec {
        kind: ProtocolKind::CrossDatabase,
        train_dataset: train_ds.name().to_string(),
        test_dataset: test_ds.name().to_string(),
        num_runs: opts.num_runs,
        variant: setup.model.variant,
    };
    spec.validate()?;
    let train_set = train_ds.all_as(Split::Train);
    let test_set = test_ds.all_as(Split::Test);
    audit_provenance(train_ds, &train_set, test_ds)?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for r in 0..opts.num_runs {
        let seed = run_seed(setup, r);
        let s = seeded(setup, seed);
        let hooks = TrainHooks { monitor: opts.track_curves.then_some(test_set.as_slice()), on_epoch: None };
        let outcome = train(&train_set, &s, hooks)?;
        let c = evaluate(&outcome.model, &test_set, &s.view_policy())?;
        runs.push(RunResult { seed, srcc: c.srcc, plcc: c.plcc });
        if opts.track_curves {
            curves.push(RunCurve { seed, log: outcome.log });
        }
    }
    Ok(EvalReport {
        protocol: ProtocolKind::CrossDatabase,
        train_dataset: spec.train_dataset,
        test_dataset: spec.test_dataset,
        config_fingerprint: setup.fingerprint(),
        median: Some(median_of_runs(&runs)?),
        runs,
        variants: None,
        params: Some(setup.model.param_count()),
        reference: cross_reference(train_ds.name(), test_ds.name()),
        curves,
    })
}

/// Trains the four variants on identical splits and seeds. Variants without the
/// classification head get wider regressors to stay within ±10% of the full model.
pub fn run_ablation(dataset: &LoadedDataset, setup: &TrainSetup, opts: &ProtocolOptions) -> Result<EvalReport> {
    let spec = ProtocolSpec {
        kind: ProtocolKind::Ablation,
        train_dataset: dataset.name().to_string(),
        test_dataset: dataset.name().to_string(),
        num_runs: opts.num_runs,
        variant: Variant::PmtFull,
    };
    spec.validate()?;
    let configs = ablation_configs(&setup.model)?;
    let mut variants = Vec::new();
    for cfg in configs {
        let mut vs = setup.clone();
        vs.model = cfg.clone();
        vs.train.schedule = None;
        let mut runs = Vec::new();
        let mut lambdas = Vec::new();
        for r in 0..opts.num_runs {
            let seed = run_seed(setup, r);
            let (train_set, test_set) = split_dataset(dataset, opts.train_fraction, seed)?;
            let s = seeded(&vs, seed);
            let outcome = train(&train_set, &s, TrainHooks::default())?;
            if r == 0 {
                lambdas = outcome.log.rows.iter().map(|row| (row.lambda1, row.lambda2)).collect();
            }
            let c = evaluate(&outcome.model, &test_set, &s.view_policy())?;
            runs.push(RunResult { seed, srcc: c.srcc, plcc: c.plcc });
        }
        variants.push(VariantResult {
            variant: cfg.variant,
            params: cfg.param_count(),
            reg_widths: cfg.reg_widths.clone(),
            median: median_of_runs(&runs)?,
            runs,
            lambdas,
        });
    }
    let full = variants.last().expect("four variants");
    Ok(EvalReport {
        protocol: ProtocolKind::Ablation,
        train_dataset: spec.train_dataset,
        test_dataset: spec.test_dataset,
        config_fingerprint: setup.fingerprint(),
        runs: full.runs.clone(),
        median: Some(full.median),
        params: Some(full.params),
        variants: Some(variants),
        reference: None,
        curves: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ProtocolKind, a: &str, b: &str, n: usize) -> ProtocolSpec {
        ProtocolSpec { kind, train_dataset: a.into(), test_dataset: b.into(), num_runs: n, variant: Variant::PmtFull }
    }

    #[test]
    fn spec_preconditions() {
        assert!(spec(ProtocolKind::WithinDataset, "a", "a", 3).validate().is_ok());
        assert!(spec(ProtocolKind::WithinDataset, "a", "b", 3).validate().is_err());
        assert!(spec(ProtocolKind::CrossDatabase, "a", "a", 1).validate().is_err());
        assert!(spec(ProtocolKind::CrossDatabase, "a", "b", 1).validate().is_ok());
        assert!(spec(ProtocolKind::WithinDataset, "a", "a", 0).validate().is_err());
    }

    #[test]
    fn median_matches_sort_oracle() {
        let runs: Vec<RunResult> = [(0.5, 0.9), (0.7, 0.1), (0.6, 0.3), (0.9, 0.2), (0.1, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, &(s, p))| RunResult { seed: i as u64, srcc: s, plcc: p })
            .collect();
        let m = median_of_runs(&runs).unwrap();
        let mut s: Vec<f64> = runs.iter().map(|r| r.srcc).collect();
        let mut p: Vec<f64> = runs.iter().map(|r| r.plcc).collect();
        s.sort_by(f64::total_cmp);
        p.sort_by(f64::total_cmp);
        assert_eq!(m.srcc, s[2]);
        assert_eq!(m.plcc, p[2]);
    }

    #[test]
    fn published_references() {
        assert_eq!(within_reference("BID").unwrap().srcc, 0.874);
        assert_eq!(within_reference("BID").unwrap().plcc, Some(0.894));
        assert_eq!(cross_reference("LIVE-C", "BID").unwrap().srcc, 0.897);
        assert!(within_reference("synthetic").is_none());
    }
}
