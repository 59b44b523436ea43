//! Python bindings: models, training, evaluation reports, metrics,
//! splitting, the synthetic dataset and learning-rate schedules.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use satnet_core::datasets::{self, LabeledDataset, SplitSpec};
use satnet_core::engine::Tensor;
use satnet_core::metrics::{self, ConfusionMatrix, EvalReport};
use satnet_core::models::{Checkpoint, Model, ModelSpec, Variant};
use satnet_core::regularization::AugmentConfig;
use satnet_core::training::{self, lr_at, ClassWeightTable, EvalSettings, OptimizerKind, Schedule, TrainConfig};
use satnet_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyFloatingPointError::new_err(e.to_string()),
        Error::Io { .. } | Error::Data(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<u64>>) -> PyResult<ConfusionMatrix> {
    ConfusionMatrix::from_rows(&rows).map_err(py_err)
}

fn defined(r: satnet_core::Result<f64>) -> PyResult<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(py_err(e)),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// An in-memory labelled image set.
#[pyclass(name = "Dataset", module = "satnet")]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// The four-class synthetic spatial-vs-spectral set.
    #[staticmethod]
    #[pyo3(signature = (n_per_class, seed = 0))]
    fn synthetic(n_per_class: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: datasets::synth_generate(n_per_class, seed).map_err(py_err)?,
        })
    }

    /// Loads `<root>/<Class>/*.png|jpg`.
    #[staticmethod]
    fn load(root: PathBuf) -> PyResult<Self> {
        let (inner, _) = datasets::load_directory(&root).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn paths(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.path.clone()).collect()
    }

    /// Flattened `3×64×64` image `i`, channel-major.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(i)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    /// Writes the set as a PNG directory tree.
    fn write_png(&self, root: PathBuf) -> PyResult<()> {
        datasets::write_png_tree(&self.inner, &root).map_err(py_err)
    }
}

/// One of the three architectures with its parameters.
#[pyclass(name = "Model", module = "satnet", unsendable)]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant, num_classes, seed = 0, channels = None))]
    fn new(variant: &str, num_classes: usize, seed: u64, channels: Option<Vec<usize>>) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(py_err)?;
        let mut spec = ModelSpec::new(v, num_classes);
        if let Some(c) = channels {
            spec = spec.with_channels(c);
        }
        Ok(PyModel {
            inner: Model::build(&spec, seed).map_err(py_err)?,
        })
    }

    /// Restores a model from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(&path).map_err(py_err)?;
        Ok(PyModel {
            inner: ck.restore().map_err(py_err)?,
        })
    }

    #[pyo3(signature = (path, epoch = 0, best_val_acc = 0.0))]
    fn save(&self, path: PathBuf, epoch: usize, best_val_acc: f64) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, epoch, best_val_acc).save(&path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.spec().variant.to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec().num_classes
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Canonical architecture description stored in checkpoints.
    #[getter]
    fn spec_text(&self) -> String {
        self.inner.spec().canonical()
    }

    /// Eval-mode logits for `batch` images given as one flat
    /// `batch×3×64×64` buffer.
    fn predict(&mut self, pixels: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let x = Tensor::new(&[batch, 3, datasets::IMAGE_SIZE, datasets::IMAGE_SIZE], pixels).map_err(py_err)?;
        let y = self.inner.predict(&x).map_err(py_err)?;
        Ok(y.data().chunks(self.inner.spec().num_classes).map(|r| r.to_vec()).collect())
    }

    /// `σ(α)` per residual block (balanced12 only).
    fn fusion_weights(&self) -> PyResult<Vec<f64>> {
        self.inner.alphas().map_err(py_err)
    }

    /// Raw `α` per residual block (balanced12 only).
    fn alpha_logits(&self) -> PyResult<Vec<f64>> {
        self.inner.alpha_logits().map_err(py_err)
    }
}

/// Trains `model` with its variant's recipe, overridable by keyword, and
/// leaves it holding the best-validation weights. Returns the history as a
/// list of dicts.
#[pyfunction]
#[pyo3(signature = (model, dataset, train_idx, val_idx, seed = 0, epochs = None, batch_size = None, lr = None, optimizer = None, schedule = None, class_weights = None, augment = true))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    dataset: &PyDataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<&str>,
    schedule: Option<&str>,
    class_weights: Option<&str>,
    augment: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = TrainConfig::preset(model.inner.spec().variant, seed);
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(o) = optimizer {
        cfg.optimizer = o.parse::<OptimizerKind>().map_err(py_err)?;
    }
    if let Some(s) = schedule {
        cfg.schedule = Schedule::parse(s).map_err(py_err)?;
    }
    if let Some(w) = class_weights {
        cfg.class_weights = ClassWeightTable::parse(w).map_err(py_err)?;
    }
    if !augment {
        let a = &cfg.augment;
        cfg.augment = AugmentConfig::normalize_only(a.normalize_mean, a.normalize_std);
    }
    let out = training::train(&mut model.inner, &dataset.inner, &train_idx, &val_idx, &cfg).map_err(py_err)?;
    model.inner = out.best.restore().map_err(py_err)?;
    out.history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_acc", r.train_acc)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("val_acc", r.val_acc)?;
            d.set_item("lr", r.lr)?;
            d.set_item("alpha_mean", r.alpha_mean)?;
            d.set_item("alpha_per_block", r.alpha_per_block.clone())?;
            Ok(d)
        })
        .collect()
}

/// Evaluates `model` on `indices` and returns the full report as a dict.
#[pyfunction]
#[pyo3(signature = (model, dataset, indices, batch_size = 64))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    dataset: &PyDataset,
    indices: Vec<usize>,
    batch_size: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let settings = EvalSettings {
        batch_size,
        ..EvalSettings::default()
    };
    let p = training::evaluate(&mut model.inner, &dataset.inner, &indices, &settings).map_err(py_err)?;
    let report = EvalReport::build(
        &dataset.inner.class_names,
        &p.preds,
        &p.labels,
        &p.probs,
        model.inner.alphas().ok(),
        Vec::new(),
    )
    .map_err(py_err)?;
    json_to_py(py, &report.to_json().map_err(py_err)?)
}

/// Human-readable rendering of a report dict returned by [`evaluate`].
#[pyfunction]
fn render_report(py: Python<'_>, report: Bound<'_, PyAny>) -> PyResult<String> {
    let text: String = py.import("json")?.call_method1("dumps", (report,))?.extract()?;
    Ok(EvalReport::from_json(&text).map_err(py_err)?.render_text())
}

/// Deterministic train/val/test index lists.
#[pyfunction]
#[pyo3(signature = (labels, num_classes, seed = 42, fractions = (0.70, 0.15, 0.15), stratified = true))]
fn split_labels(
    labels: Vec<usize>,
    num_classes: usize,
    seed: u64,
    fractions: (f64, f64, f64),
    stratified: bool,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let spec = SplitSpec {
        fractions,
        seed,
        stratified,
    };
    let s = datasets::split_labels(&labels, num_classes, &spec).map_err(py_err)?;
    Ok((s.train, s.val, s.test))
}

#[pyfunction]
fn confusion_matrix(preds: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> PyResult<Vec<Vec<u64>>> {
    Ok(metrics::confusion(&preds, &labels, num_classes).map_err(py_err)?.rows())
}

/// Cohen's kappa, `None` when undefined.
#[pyfunction]
fn kappa(matrix_rows: Vec<Vec<u64>>) -> PyResult<Option<f64>> {
    defined(metrics::kappa(&matrix(matrix_rows)?))
}

/// Multiclass Matthews correlation, `None` when undefined.
#[pyfunction]
fn mcc(matrix_rows: Vec<Vec<u64>>) -> PyResult<Option<f64>> {
    defined(metrics::mcc(&matrix(matrix_rows)?))
}

/// Per-class precision, recall and F1 plus macro averages.
#[pyfunction]
fn per_class_metrics(py: Python<'_>, matrix_rows: Vec<Vec<u64>>) -> PyResult<Bound<'_, PyDict>> {
    let pc = metrics::per_class_metrics(&matrix(matrix_rows)?).map_err(py_err)?;
    let d = PyDict::new(py);
    let rows: Vec<(f64, f64, f64, u64)> = pc.classes.iter().map(|c| (c.precision, c.recall, c.f1, c.support)).collect();
    d.set_item("precision", rows.iter().map(|r| r.0).collect::<Vec<_>>())?;
    d.set_item("recall", rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
    d.set_item("f1", rows.iter().map(|r| r.2).collect::<Vec<_>>())?;
    d.set_item("support", rows.iter().map(|r| r.3).collect::<Vec<_>>())?;
    d.set_item("macro_precision", pc.macro_precision)?;
    d.set_item("macro_recall", pc.macro_recall)?;
    d.set_item("macro_f1", pc.macro_f1)?;
    Ok(d)
}

/// Learning rate at a 0-based epoch for a schedule such as
/// `"warm_restarts(15, 2)"` or `"cosine(40)"`.
#[pyfunction]
#[pyo3(signature = (schedule, base_lr, epoch, plateau_reductions = 0))]
fn learning_rate(schedule: &str, base_lr: f64, epoch: usize, plateau_reductions: usize) -> PyResult<f64> {
    lr_at(&Schedule::parse(schedule).map_err(py_err)?, base_lr, epoch, plateau_reductions).map_err(py_err)
}

#[pymodule]
fn satnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(split_labels, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
