use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmdenoise::data::{self, MultimodalDataset, NoiseSpec, SyntheticSpec};
use mmdenoise::metrics;
use mmdenoise::model::{self, Ablation, ModelConfig};
use mmdenoise::train::{self, TrainConfig};
use mmdenoise::{Error, Matrix};

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e @ (Error::InvalidArgument { .. } | Error::Config { .. } | Error::DimensionMismatch { .. } | Error::InsufficientSamples { .. }) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrices(modalities: &[Rows]) -> PyResult<Vec<Matrix>> {
    modalities.iter().map(|rows| Matrix::from_rows(rows).map_err(to_py)).collect()
}

fn dataset(modalities: &[Rows], labels: Vec<usize>) -> PyResult<MultimodalDataset> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    MultimodalDataset::new(matrices(modalities)?, labels, num_classes).map_err(to_py)
}

fn ablation(name: &str) -> PyResult<Ablation> {
    Ok(match name {
        "full" => Ablation::full(),
        "no_ttce" => Ablation::without_ttce(),
        "assa_only" => Ablation::without_ttce_saca(),
        "none" => Ablation::none(),
        "strict" => Ablation {
            strict_alignment: true,
            ..Ablation::full()
        },
        "uniform" => Ablation {
            confidence_guidance: false,
            ..Ablation::full()
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown ablation `{other}`; expected full, no_ttce, assa_only, none, strict or uniform"
            )))
        }
    })
}

/// Synthetic multimodal data with shared class latents. Returns `(modalities, labels)`.
#[pyfunction]
#[pyo3(signature = (n=600, num_classes=4, modality_dims=vec![20, 30], seed=0))]
fn generate_synthetic(n: usize, num_classes: usize, modality_dims: Vec<usize>, seed: u64) -> PyResult<(Vec<Rows>, Vec<usize>)> {
    let ds = data::generate_synthetic(&SyntheticSpec {
        n,
        num_classes,
        modality_dims,
        seed,
        ..SyntheticSpec::default()
    })
    .map_err(to_py)?;
    Ok((ds.modalities.iter().map(Matrix::to_rows).collect(), ds.labels))
}

/// Additive Gaussian noise of severity `epsilon` and row shuffling of a fraction `eta`.
/// Returns `(modalities, corrupted_indices)`; labels are never permuted.
#[pyfunction]
#[pyo3(signature = (modalities, labels, epsilon, eta, seed=0))]
fn inject_noise(modalities: Vec<Rows>, labels: Vec<usize>, epsilon: f64, eta: f64, seed: u64) -> PyResult<(Vec<Rows>, Vec<usize>)> {
    let ds = dataset(&modalities, labels)?;
    let spec = NoiseSpec::new(epsilon, eta, seed);
    spec.validate().map_err(to_py)?;
    let (noisy, idx) = data::inject_noise(&ds, &spec).map_err(to_py)?;
    Ok((noisy.modalities.iter().map(Matrix::to_rows).collect(), idx))
}

/// Accuracy, weighted and macro F1 (plus F1 and AUC for two classes).
#[pyfunction]
#[pyo3(signature = (predictions, labels, num_classes, scores=None))]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    scores: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&predictions, &labels, num_classes, scores.as_deref()).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("weighted_f1", r.weighted_f1)?;
    d.set_item("macro_f1", r.macro_f1)?;
    d.set_item("f1", r.binary_f1)?;
    d.set_item("auc", r.auc)?;
    d.set_item("confusion", r.confusion)?;
    Ok(d)
}

#[pyclass(name = "Model", module = "mmdenoise")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dims, num_classes, seed=0, ablation="full", latent_dim=32, hidden_dim=64))]
    fn new(input_dims: Vec<usize>, num_classes: usize, seed: u64, ablation: &str, latent_dim: usize, hidden_dim: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            latent_dim,
            hidden_dim,
            ablation: self::ablation(ablation)?,
            ..ModelConfig::default()
        };
        let inner = model::Model::new(&input_dims, num_classes, cfg, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    /// Trains in place and returns the per-epoch history as a list of dicts.
    #[pyo3(signature = (modalities, labels, epochs=200, lr=1e-3, seed=0))]
    fn fit<'py>(&mut self, py: Python<'py>, modalities: Vec<Rows>, labels: Vec<usize>, epochs: usize, lr: f64, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut ds = dataset(&modalities, labels)?;
        ds.num_classes = self.inner.num_classes;
        let cfg = TrainConfig {
            epochs,
            lr,
            ..TrainConfig::default()
        };
        let history = train::train(&mut self.inner, &ds, &cfg, seed).map_err(to_py)?;
        history
            .records
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("l_assa", r.losses.assa())?;
                d.set_item("l_saca", r.losses.saca())?;
                d.set_item("l_nll_c", r.losses.nll_cross)?;
                d.set_item("l_re", r.losses.reconstruction)?;
                d.set_item("l_cls", r.losses.classification)?;
                d.set_item("train_acc", r.train_accuracy)?;
                Ok(d)
            })
            .collect()
    }

    /// Predicted classes after `iterations` test-time enhancement steps.
    #[pyo3(signature = (modalities, iterations=30))]
    fn predict(&self, modalities: Vec<Rows>, iterations: usize) -> PyResult<Vec<usize>> {
        let xs = matrices(&modalities)?;
        Ok(self.inner.infer(&xs, iterations, None).map_err(to_py)?.predicted())
    }

    /// Class logits after `iterations` enhancement steps.
    #[pyo3(signature = (modalities, iterations=30))]
    fn logits(&self, modalities: Vec<Rows>, iterations: usize) -> PyResult<Rows> {
        let xs = matrices(&modalities)?;
        Ok(self.inner.infer(&xs, iterations, None).map_err(to_py)?.logits.to_rows())
    }

    /// Per-iteration `(l_re, l_nll_s, l_nll_c)` of the enhancement loop, initial state first.
    #[pyo3(signature = (modalities, iterations=30))]
    fn trace(&self, modalities: Vec<Rows>, iterations: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let xs = matrices(&modalities)?;
        let inf = self.inner.infer(&xs, iterations, None).map_err(to_py)?;
        let Some(state) = inf.state else {
            return Ok(Vec::new());
        };
        Ok(std::iter::once(&state.initial)
            .chain(&state.trace)
            .map(|r| (r.l_re, r.nll_specific, r.nll_cross))
            .collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::Model::load(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dims={:?}, num_classes={}, latent_dim={})",
            self.inner.input_dims, self.inner.num_classes, self.inner.config.latent_dim
        )
    }
}

#[pymodule]
#[pyo3(name = "mmdenoise")]
fn mmdenoise_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
