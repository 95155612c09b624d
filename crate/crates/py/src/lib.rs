//! Python bindings: datasets, models, training, attack scores, memorization
//! statistics and the experiment pipeline.
//!
//! Matrices cross the boundary as lists of rows; errors surface as
//! `ValueError` (bad input or config), `OSError` (files) or `RuntimeError`
//! (numeric failures and diverged training).

use std::path::PathBuf;

use demem_core::lab::{self, ExperimentConfig};
use demem_core::mia::{self, AttackMethod, AttackScores, GaussianStats};
use demem_core::{memorization, trainers, DatasetKind, Error, Tensor};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Training { .. } | Error::Usage(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::matrix(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_config(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::parse(text).map_err(py_err)
}

#[pyclass(name = "Dataset", module = "demem", frozen)]
struct PyDataset {
    inner: demem_core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, n_classes=2))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> PyResult<Self> {
        let t = matrix(features)?;
        let dim = t.cols();
        let inner = demem_core::Dataset::new(t.into_values(), labels, dim, n_classes).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// `kind` is one of `two_gaussians`, `rings`, `xor_grid`.
    #[staticmethod]
    #[pyo3(signature = (kind, n, noise=1.0, seed=0))]
    fn generate(kind: &str, n: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let kind: DatasetKind = kind.parse().map_err(py_err)?;
        let inner = demem_core::generate_dataset(kind, n, noise, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: demem_core::load_csv(path).map_err(py_err)? })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.inputs())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={}, n_classes={})", self.inner.len(), self.inner.dim(), self.inner.n_classes())
    }
}

#[pyclass(name = "Model", module = "demem", frozen)]
struct PyModel {
    inner: demem_core::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh He-initialized ReLU MLP, e.g. `Model([2, 32, 32, 2], seed=0)`.
    #[new]
    #[pyo3(signature = (layer_widths, seed=0))]
    fn new(layer_widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        let cfg = demem_core::ModelConfig::mlp(layer_widths);
        Ok(Self { inner: demem_core::Model::init(&cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: demem_core::Model::load_checkpoint(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(path).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.inner.flat_params()
    }

    /// Logits for a batch of rows.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.forward(&matrix(x)?).map_err(py_err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(x)?).map_err(py_err)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        demem_core::attacks::natural_accuracy(&self.inner, &data.inner).map_err(py_err)
    }

    /// Accuracy under the evaluation PGD attack (20 steps, `ε/8`).
    #[pyo3(signature = (data, epsilon, seed=0))]
    fn robust_accuracy(&self, data: &PyDataset, epsilon: f64, seed: u64) -> PyResult<f64> {
        let params = demem_core::attacks::AttackParams::evaluation(epsilon);
        demem_core::attacks::robust_accuracy(&self.inner, &data.inner, &params, seed).map_err(py_err)
    }
}

/// Trains a model on `data`. `config` holds `key=value` lines in the same
/// format as the command-line config files (`model.*` and `train.*` keys are
/// used). Returns the model and one dict per epoch.
#[pyfunction]
#[pyo3(signature = (data, config=""))]
fn train(py: Python<'_>, data: &PyDataset, config: &str) -> PyResult<(PyModel, Vec<Py<PyAny>>)> {
    let cfg = parse_config(config)?;
    let (model, history) = py
        .detach(|| trainers::train(&cfg.train, &cfg.model, &data.inner))
        .map_err(py_err)?;
    let epochs = history
        .epochs
        .iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("mean_loss", r.mean_loss)?;
            d.set_item("psi", r.psi)?;
            d.set_item("nat_acc", r.nat_acc)?;
            d.set_item("rob_acc", r.rob_acc)?;
            Ok(d.into_any().unbind())
        })
        .collect::<PyResult<_>>()?;
    Ok((PyModel { inner: model }, epochs))
}

/// Per-sample softmax cross-entropy of `logits` (rows) against `labels`.
#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
    let l = demem_core::softmax_cross_entropy(&matrix(logits)?, &labels).map_err(py_err)?;
    Ok(l.per_sample().to_vec())
}

/// Population variance of per-sample losses.
#[pyfunction]
fn batch_variance(losses: Vec<f64>) -> PyResult<f64> {
    demem_core::batch_variance(&losses).map_err(py_err)
}

/// Mean loss plus `lam` times the batch variance.
#[pyfunction]
fn demem_loss(losses: Vec<f64>, lam: f64) -> PyResult<f64> {
    let l = demem_core::BatchLosses::new(losses).map_err(py_err)?;
    trainers::demem_total_loss(&l, lam).map_err(py_err)
}

#[pyfunction]
fn logit_scale(p: f64) -> PyResult<f64> {
    mia::logit_scale(p).map_err(py_err)
}

fn stats(values: &[f64]) -> PyResult<GaussianStats> {
    GaussianStats::fit(values).map_err(py_err)
}

/// Online LiRA score of a target confidence against IN and OUT shadow
/// confidences.
#[pyfunction]
fn lira_online(confidence: f64, in_confidences: Vec<f64>, out_confidences: Vec<f64>) -> PyResult<f64> {
    let phi = |v: &[f64]| v.iter().map(|&p| mia::logit_scale(p)).collect::<Result<Vec<_>, _>>().map_err(py_err);
    let (ins, outs) = (phi(&in_confidences)?, phi(&out_confidences)?);
    mia::lira_online_score(mia::logit_scale(confidence).map_err(py_err)?, &stats(&ins)?, &stats(&outs)?).map_err(py_err)
}

#[pyfunction]
fn lira_offline(confidence: f64, out_confidences: Vec<f64>) -> PyResult<f64> {
    let outs = out_confidences
        .iter()
        .map(|&p| mia::logit_scale(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    mia::lira_offline_score(mia::logit_scale(confidence).map_err(py_err)?, &stats(&outs)?).map_err(py_err)
}

/// Highest TPR at FPR ≤ `fpr`; returns `(tpr, fpr_achieved, threshold)`.
#[pyfunction]
fn tpr_at_fpr(scores: Vec<f64>, is_member: Vec<bool>, fpr: f64) -> PyResult<(f64, f64, f64)> {
    let s = AttackScores::new(scores, is_member).map_err(py_err)?;
    let p = mia::tpr_at_fpr(&s, fpr).map_err(py_err)?;
    Ok((p.tpr, p.fpr, p.threshold))
}

/// ROC points `(threshold, tpr, fpr)` from the strictest threshold down.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<Vec<(f64, f64, f64)>> {
    let s = AttackScores::new(scores, is_member).map_err(py_err)?;
    Ok(mia::roc_curve(&s).map_err(py_err)?.into_iter().map(|p| (p.threshold, p.tpr, p.fpr)).collect())
}

/// Leave-one-model-out scores for an `M×S` shadow ensemble. Entries are
/// `None` where a sample lacks IN or OUT coverage.
#[pyfunction]
#[pyo3(signature = (membership, confidences, method="lira_online"))]
fn ensemble_scores(membership: Vec<Vec<bool>>, confidences: Vec<Vec<f64>>, method: &str) -> PyResult<Vec<Vec<Option<f64>>>> {
    let method: AttackMethod = method.parse().map_err(py_err)?;
    let m = membership.len();
    let s = membership.first().map_or(0, Vec::len);
    let ens = mia::ShadowEnsemble::new(m, s, membership.concat(), confidences.concat()).map_err(py_err)?;
    (0..m)
        .map(|t| mia::score_target(&ens, t, method).map(|r| r.scores).map_err(py_err))
        .collect()
}

/// Memorization scores from an `M×S` membership and correctness matrix.
#[pyfunction]
fn memorization_scores(membership: Vec<Vec<bool>>, correct: Vec<Vec<bool>>) -> PyResult<Vec<Option<f64>>> {
    let est = memorization::MemorizationEstimate::from_ensemble(membership.len(), &membership.concat(), &correct.concat())
        .map_err(py_err)?;
    Ok(est.per_sample)
}

#[pyfunction]
fn bin_assign(mem: f64) -> PyResult<usize> {
    memorization::bin_assign(mem).map_err(py_err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    memorization::spearman(&x, &y).map_err(py_err)
}

/// Trains the shadow ensemble described by `config` into `out`.
#[pyfunction]
#[pyo3(signature = (config, out, workers=0))]
fn run_shadow(py: Python<'_>, config: &str, out: PathBuf, workers: usize) -> PyResult<usize> {
    let cfg = parse_config(config)?;
    let manifest = py.detach(|| lab::run_shadow(&cfg, &out, workers)).map_err(py_err)?;
    Ok(manifest.completed_models.len())
}

/// Attacks the shadow run in `out`; returns summary dicts.
#[pyfunction]
#[pyo3(signature = (out, workers=0))]
fn run_attack(py: Python<'_>, out: PathBuf, workers: usize) -> PyResult<Vec<Py<PyAny>>> {
    let outcome = py.detach(|| lab::run_attack(&out, None, None, workers)).map_err(py_err)?;
    outcome
        .summary
        .iter()
        .map(|s| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("attack_name", &s.attack_name)?;
            d.set_item("fpr_target", s.fpr_target)?;
            d.set_item("tpr_mean", s.tpr_mean)?;
            d.set_item("tpr_std", s.tpr_std)?;
            d.set_item("n_targets", s.n_targets)?;
            d.set_item("resolvable", s.resolvable)?;
            Ok(d.into_any().unbind())
        })
        .collect()
}

/// Writes the memorization dump for the shadow run in `out`.
#[pyfunction]
fn run_memorize(py: Python<'_>, out: PathBuf) -> PyResult<Vec<Option<f64>>> {
    Ok(py.detach(|| lab::run_memorize(&out)).map_err(py_err)?.per_sample)
}

#[pymodule]
fn demem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(batch_variance, m)?)?;
    m.add_function(wrap_pyfunction!(demem_loss, m)?)?;
    m.add_function(wrap_pyfunction!(logit_scale, m)?)?;
    m.add_function(wrap_pyfunction!(lira_online, m)?)?;
    m.add_function(wrap_pyfunction!(lira_offline, m)?)?;
    m.add_function(wrap_pyfunction!(tpr_at_fpr, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_scores, m)?)?;
    m.add_function(wrap_pyfunction!(memorization_scores, m)?)?;
    m.add_function(wrap_pyfunction!(bin_assign, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(run_shadow, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(run_memorize, m)?)?;
    Ok(())
}
