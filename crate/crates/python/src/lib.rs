use std::path::{Path, PathBuf};

use pmt_iqa::binning::{self, BinningConfig};
use pmt_iqa::checkpoint::Checkpoint as CoreCheckpoint;
use pmt_iqa::config::RunConfig;
use pmt_iqa::dataset::{self, split_dataset, DatasetManifest, LoadedDataset, ResizePolicy, ScorePolarity, Split};
use pmt_iqa::metrics::{self, MethodResultTable, PairedScores};
use pmt_iqa::synthetic::{Distortion, SyntheticSpec};
use pmt_iqa::train::{self, TrainHooks};
use pmt_iqa::{head, objective, DType, Device, Error, Tensor};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingInput { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Tensor(_) | Error::Io(_) | Error::Plot(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pairs(subjective: Vec<f64>, predicted: Vec<f64>) -> PyResult<PairedScores> {
    PairedScores::new(subjective, predicted).map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (n, k), &Device::Cpu).map_err(|e| py_err(e.into()))
}

fn scalar(t: pmt_iqa::Result<Tensor>) -> PyResult<f64> {
    t.and_then(|t| Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)).map_err(py_err)
}

/// Spearman rank-order correlation.
#[pyfunction]
fn srcc(subjective: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    metrics::srcc(&pairs(subjective, predicted)?).map_err(py_err)
}

/// Tie-free closed form `1 - 6·Σd²/(n(n²-1))`.
#[pyfunction]
fn srcc_closed_form(subjective: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    metrics::srcc_closed_form(&pairs(subjective, predicted)?).map_err(py_err)
}

/// Pearson linear correlation.
#[pyfunction]
fn plcc(subjective: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    metrics::plcc(&pairs(subjective, predicted)?).map_err(py_err)
}

#[pyfunction]
fn fractional_ranks(values: Vec<f64>) -> Vec<f64> {
    metrics::fractional_ranks(&values)
}

#[pyfunction]
fn lower_median(values: Vec<f64>) -> PyResult<f64> {
    metrics::lower_median(&values).map_err(py_err)
}

/// Ranks methods from `(method, dataset, srcc, plcc)` rows; returns one dict per method.
#[pyfunction]
fn rank_methods<'py>(py: Python<'py>, rows: Vec<(String, String, f64, f64)>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut table = MethodResultTable::default();
    for (m, d, s, p) in &rows {
        table.insert(m, d, *s, *p).map_err(py_err)?;
    }
    metrics::rank_methods(&table)
        .map_err(py_err)?
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", &r.method)?;
            d.set_item("srcc_ranks", r.srcc_ranks.clone())?;
            d.set_item("plcc_ranks", r.plcc_ranks.clone())?;
            d.set_item("avg_srcc_rank", r.avg_srcc_rank)?;
            d.set_item("avg_plcc_rank", r.avg_plcc_rank)?;
            d.set_item("overall_srcc", r.overall_srcc)?;
            d.set_item("overall_plcc", r.overall_plcc)?;
            Ok(d)
        })
        .collect()
}

/// `(λ1, λ2)` at epoch `t` of `T`.
#[pyfunction]
#[pyo3(name = "weights_at")]
fn py_weights_at(t: usize, max_epochs: usize, xi: f64) -> PyResult<(f64, f64)> {
    objective::weights_at(t, max_epochs, xi).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (w, y_min=0.0, y_max=1.0))]
fn num_categories(w: f64, y_min: f64, y_max: f64) -> PyResult<usize> {
    binning::num_categories(&BinningConfig { interval: w, y_min, y_max }).map_err(py_err)
}

/// Quality level in `1..=K`.
#[pyfunction]
#[pyo3(signature = (score, w=0.2, y_min=0.0, y_max=1.0))]
fn to_level(score: f64, w: f64, y_min: f64, y_max: f64) -> PyResult<usize> {
    binning::to_level(score, &BinningConfig { interval: w, y_min, y_max }).map_err(py_err)
}

#[pyfunction]
fn to_one_hot(level: usize, k: usize) -> PyResult<Vec<f64>> {
    binning::to_one_hot(level, k).map_err(py_err)
}

/// Maps raw scores onto `[0, 1]` with 1 meaning best quality.
#[pyfunction]
#[pyo3(signature = (raw, raw_min, raw_max, lower_is_better=false))]
fn scale_scores(raw: Vec<f64>, raw_min: f64, raw_max: f64, lower_is_better: bool) -> PyResult<Vec<f64>> {
    let polarity = if lower_is_better { ScorePolarity::LowerIsBetter } else { ScorePolarity::HigherIsBetter };
    let manifest = DatasetManifest {
        name: "inline".into(),
        entries: raw
            .iter()
            .enumerate()
            .map(|(i, &s)| dataset::ManifestEntry { image_path: i.to_string(), raw_score: s })
            .collect(),
        polarity,
        raw_min,
        raw_max,
        num_views: None,
        root: PathBuf::new(),
    };
    dataset::scale_scores(&manifest).map_err(py_err)
}

#[pyfunction]
fn l1_loss(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    let col = |v: Vec<f64>| matrix(&v.into_iter().map(|x| vec![x]).collect::<Vec<_>>());
    scalar(objective::l1_loss(&col(pred)?, &col(target)?))
}

/// Cross entropy from per-row probabilities.
#[pyfunction]
fn ce_loss(probs: Vec<Vec<f64>>, one_hot: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar(objective::ce_loss(&matrix(&probs)?, &matrix(&one_hot)?))
}

#[pyfunction]
fn ce_loss_from_logits(logits: Vec<Vec<f64>>, one_hot: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar(objective::ce_loss_from_logits(&matrix(&logits)?, &matrix(&one_hot)?))
}

#[pyfunction]
fn softmax(logits: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    head::softmax_rows(&matrix(&logits)?)
        .and_then(|t| Ok(t.to_vec2::<f64>()?))
        .map_err(py_err)
}

/// Writes a synthetic dataset and returns the manifest CSV path.
#[pyfunction]
#[pyo3(signature = (out_dir, n, size=64, distortion="blur", seed=0, levels=5))]
fn make_synthetic(out_dir: PathBuf, n: usize, size: u32, distortion: &str, seed: u64, levels: usize) -> PyResult<String> {
    let kind: Distortion = distortion.parse().map_err(py_err)?;
    let mut spec = SyntheticSpec::new(n, size, kind, seed);
    spec.severity_levels = levels;
    let (_, path) = pmt_iqa::synthetic::make_synthetic(&spec, &out_dir).map_err(py_err)?;
    Ok(path.display().to_string())
}

/// A trained model with its full setup and optimizer state.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

fn load_dataset(path: &Path, crop_size: u32) -> PyResult<LoadedDataset> {
    let path = if path.is_dir() { path.join("manifest.csv") } else { path.to_path_buf() };
    let manifest = DatasetManifest::load(&path).map_err(py_err)?;
    let short_side = (crop_size as f64 * 256.0 / 224.0).round() as u32;
    LoadedDataset::load(manifest, &ResizePolicy { crop_size, short_side }).map_err(py_err)
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint.clone()
    }

    /// The training setup as a JSON string.
    #[getter]
    fn setup(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.setup).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.setup.model.param_count()
    }

    /// Per-image scores for every image of a dataset (manifest CSV or directory),
    /// in manifest order.
    fn predict(&self, py: Python<'_>, dataset: PathBuf) -> PyResult<Vec<f64>> {
        let ds = load_dataset(&dataset, self.inner.setup.crop_size)?;
        let model = self.inner.to_model(&Device::Cpu).map_err(py_err)?;
        let samples = ds.all_as(Split::Test);
        let policy = self.inner.setup.view_policy();
        py.detach(|| train::predict(&model, &samples, &policy)).map_err(py_err)
    }

    /// `(srcc, plcc)` against the dataset's scaled scores.
    fn evaluate(&self, py: Python<'_>, dataset: PathBuf) -> PyResult<(f64, f64)> {
        let ds = load_dataset(&dataset, self.inner.setup.crop_size)?;
        let model = self.inner.to_model(&Device::Cpu).map_err(py_err)?;
        let samples = ds.all_as(Split::Test);
        let policy = self.inner.setup.view_policy();
        let c = py.detach(|| train::evaluate(&model, &samples, &policy)).map_err(py_err)?;
        Ok((c.srcc, c.plcc))
    }
}

/// Trains on the training split described by a run-config file. Returns the final
/// checkpoint, the per-epoch log rows and the held-out `(srcc, plcc)`.
#[pyfunction]
#[pyo3(signature = (config, overrides=Vec::new()))]
fn train_from_config<'py>(
    py: Python<'py>,
    config: PathBuf,
    overrides: Vec<String>,
) -> PyResult<(Checkpoint, Vec<Bound<'py, PyDict>>, (f64, f64))> {
    let cfg = RunConfig::load(&config, &overrides).map_err(py_err)?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let r = cfg.resolve(&base).map_err(py_err)?;
    let (outcome, c) = py
        .detach(|| -> pmt_iqa::Result<_> {
            let ds = LoadedDataset::load(r.manifest.clone(), &r.resize)?;
            let (tr, te) = split_dataset(&ds, r.options.train_fraction, r.setup.train.seed)?;
            let outcome = train::train(&tr, &r.setup, TrainHooks::default())?;
            let c = train::evaluate(&outcome.model, &te, &r.setup.view_policy())?;
            Ok((outcome, c))
        })
        .map_err(py_err)?;
    let rows = outcome
        .log
        .rows
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("epoch", row.epoch)?;
            d.set_item("lambda1", row.lambda1)?;
            d.set_item("lambda2", row.lambda2)?;
            d.set_item("loss_r", row.loss_r)?;
            d.set_item("loss_c", row.loss_c)?;
            d.set_item("loss_total", row.loss_total)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Checkpoint { inner: outcome.checkpoint }, rows, (c.srcc, c.plcc)))
}

#[pymodule]
#[pyo3(name = "pmt_iqa")]
fn pmt_iqa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(srcc_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(fractional_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(lower_median, m)?)?;
    m.add_function(wrap_pyfunction!(rank_methods, m)?)?;
    m.add_function(wrap_pyfunction!(py_weights_at, m)?)?;
    m.add_function(wrap_pyfunction!(num_categories, m)?)?;
    m.add_function(wrap_pyfunction!(to_level, m)?)?;
    m.add_function(wrap_pyfunction!(to_one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(scale_scores, m)?)?;
    m.add_function(wrap_pyfunction!(l1_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss_from_logits, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
