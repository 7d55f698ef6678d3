//! Python module `meanteach`: model specs, corpora, mean-teacher and
//! natural-gradient runs, and the verification suites. Configs and reports
//! cross the boundary as JSON-compatible dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mtcore::harness;
use mtcore::model::{DatasetRole, Token, TokenDataset};
use mtcore::optimizer::{self, DerivedNgdParams};
use mtcore::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::InvalidInput(_)
        | Error::Dimension(_)
        | Error::TokenOutOfVocab { .. }
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Round-trips a Python object through `json` into a serde type.
fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ModelSpec", frozen)]
struct PyModelSpec {
    inner: mtcore::model::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[staticmethod]
    fn bigram(vocab_size: usize) -> PyResult<Self> {
        let inner = mtcore::model::ModelSpec::bigram(vocab_size);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn mlp(vocab_size: usize, context_len: usize, hidden_dim: usize) -> PyResult<Self> {
        let inner = mtcore::model::ModelSpec::mlp(vocab_size, context_len, hidden_dim);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn context_len(&self) -> usize {
        self.inner.context_len
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.inner.init_params(seed).into_coords()
    }

    fn logits(&self, theta: Vec<f64>, context: Vec<Token>) -> PyResult<Vec<f64>> {
        self.inner.logits(&theta, &context).map_err(err)
    }

    fn sequence_logprob(&self, theta: Vec<f64>, sequence: Vec<Token>) -> PyResult<f64> {
        self.inner.sequence_logprob(&theta, &sequence).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSpec({:?}, vocab_size={}, context_len={}, params={})",
            self.inner.kind,
            self.inner.vocab_size,
            self.inner.context_len,
            self.inner.param_count()
        )
    }
}

#[pyclass(name = "MtConfig", frozen)]
struct PyMtConfig {
    inner: optimizer::MtConfig,
}

#[pymethods]
impl PyMtConfig {
    /// Builds a config from a dict such as
    /// `{"eta": 0.01, "kappa": 1.0, "alpha": 0.5, "steps": 100, "loss": "nlul", "divergence": "kl"}`.
    #[new]
    fn new(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Self {
            inner: from_py(py, config)?,
        })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// `(γ, λ̄)` of the natural-gradient trajectory this config tracks.
    fn ngd_params(&self) -> (f64, f64) {
        let p = DerivedNgdParams::from_config(&self.inner);
        (p.gamma, p.lambda_bar)
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory {
    inner: optimizer::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn final_theta(&self) -> Vec<f64> {
        self.inner.final_theta.clone()
    }

    #[getter]
    fn final_reference(&self) -> Vec<f64> {
        self.inner.final_reference.clone()
    }

    #[getter]
    fn stopped_early(&self) -> bool {
        self.inner.stopped_early
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.loss).collect()
    }

    #[getter]
    fn grad_norms(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.grad_norm).collect()
    }

    /// Largest per-step parameter distance to another trajectory.
    fn deviation(&self, other: &PyTrajectory) -> PyResult<f64> {
        optimizer::trajectory_deviation(&self.inner, &other.inner).map_err(err)
    }

    #[pyo3(signature = (reference=None))]
    fn to_csv(&self, reference: Option<&PyTrajectory>) -> PyResult<String> {
        self.inner.to_csv(reference.map(|r| &r.inner)).map_err(err)
    }
}

fn dataset(
    spec: &PyModelSpec,
    sequences: Vec<Vec<Token>>,
    role: DatasetRole,
) -> PyResult<TokenDataset> {
    let ds = TokenDataset::from_sequences(sequences, spec.inner.context_len, role);
    ds.validate(&spec.inner).map_err(err)?;
    Ok(ds)
}

/// Mean-teacher run; full batches unless `full_batch` is false.
#[pyfunction]
#[pyo3(signature = (spec, theta0, forget, pretrain, config, full_batch=true))]
fn mt_run(
    py: Python<'_>,
    spec: &PyModelSpec,
    theta0: Vec<f64>,
    forget: Vec<Vec<Token>>,
    pretrain: Vec<Vec<Token>>,
    config: &PyMtConfig,
    full_batch: bool,
) -> PyResult<PyTrajectory> {
    let f = dataset(spec, forget, DatasetRole::Forget)?;
    let p = dataset(spec, pretrain, DatasetRole::Pretrain)?;
    let inner = py
        .detach(|| optimizer::mt_run(&spec.inner, &theta0, &f, &p, &config.inner, full_batch))
        .map_err(err)?;
    Ok(PyTrajectory { inner })
}

/// Exact natural-gradient reference run for the same config.
#[pyfunction]
fn ngd_run(
    py: Python<'_>,
    spec: &PyModelSpec,
    theta0: Vec<f64>,
    forget: Vec<Vec<Token>>,
    pretrain: Vec<Vec<Token>>,
    config: &PyMtConfig,
) -> PyResult<PyTrajectory> {
    let f = dataset(spec, forget, DatasetRole::Forget)?;
    let p = dataset(spec, pretrain, DatasetRole::Pretrain)?;
    let inner = py
        .detach(|| optimizer::ngd_run(&spec.inner, &theta0, &f, &p, &config.inner))
        .map_err(err)?;
    Ok(PyTrajectory { inner })
}

type Split = (Vec<Vec<Token>>, Vec<Vec<Token>>);

/// `(forget, pretrain)` sequences for a corpus spec dict.
#[pyfunction]
fn generate_corpus(py: Python<'_>, corpus: &Bound<'_, PyAny>) -> PyResult<Split> {
    let spec: harness::CorpusSpec = from_py(py, corpus)?;
    spec.validate().map_err(err)?;
    let seqs = spec.sequences().map_err(err)?;
    let n = spec.n_forget();
    Ok((seqs[..n].to_vec(), seqs[n..].to_vec()))
}

/// Trains a memorizing target; returns `(theta, memorization report)`.
#[pyfunction]
fn build_target<'py>(
    py: Python<'py>,
    spec: &PyModelSpec,
    forget: Vec<Vec<Token>>,
    pretrain: Vec<Vec<Token>>,
    config: &Bound<'py, PyAny>,
) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
    let cfg: harness::TargetConfig = from_py(py, config)?;
    let corpus = harness::Corpus::from_sequences(forget, pretrain, spec.inner.context_len);
    let (theta, report) = py
        .detach(|| harness::build_target(&spec.inner, &corpus, &cfg))
        .map_err(err)?;
    Ok((theta.into_coords(), to_py(py, &report)?))
}

#[pyfunction]
fn memorization_report<'py>(
    py: Python<'py>,
    spec: &PyModelSpec,
    theta: Vec<f64>,
    forget: Vec<Vec<Token>>,
    pretrain: Vec<Vec<Token>>,
    prompt_len: usize,
    completion_len: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let corpus = harness::Corpus::from_sequences(forget, pretrain, spec.inner.context_len);
    let report =
        harness::memorization_report(&spec.inner, &theta, &corpus, prompt_len, completion_len)
            .map_err(err)?;
    to_py(py, &report)
}

/// Runs a verification suite by name and returns its report.
#[pyfunction]
#[pyo3(signature = (suite, config=None))]
fn verify<'py>(
    py: Python<'py>,
    suite: &str,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let empty = PyDict::new(py).into_any();
    let config = config.unwrap_or(&empty);
    match suite {
        "lemma" => {
            let cfg: harness::LemmaConfig = from_py(py, config)?;
            to_py(py, &py.detach(|| harness::verify_lemma(&cfg)).map_err(err)?)
        }
        "theorem1" => {
            let cfg: harness::Theorem1Config = from_py(py, config)?;
            to_py(
                py,
                &py.detach(|| harness::verify_theorem1(&cfg)).map_err(err)?,
            )
        }
        "divergence-quadratic" => {
            let cfg: harness::QuadraticConfig = from_py(py, config)?;
            to_py(
                py,
                &py.detach(|| harness::verify_divergence_quadratic(&cfg))
                    .map_err(err)?,
            )
        }
        other => Err(PyValueError::new_err(format!(
            "unknown suite `{other}`; expected lemma, theorem1 or divergence-quadratic"
        ))),
    }
}

#[pyfunction]
#[pyo3(signature = (logits, y, clamp_eps=mtcore::loss::DEFAULT_CLAMP_EPS))]
fn nlul_value(logits: Vec<f64>, y: Token, clamp_eps: f64) -> f64 {
    mtcore::loss::nlul_value(&logits, y, clamp_eps)
}

#[pyfunction]
#[pyo3(signature = (logits, y, clamp_eps=mtcore::loss::DEFAULT_CLAMP_EPS))]
fn nlul_grad(logits: Vec<f64>, y: Token, clamp_eps: f64) -> Vec<f64> {
    mtcore::loss::nlul_grad(&logits, y, clamp_eps)
}

#[pyfunction]
fn ll_value(logits: Vec<f64>, y: Token) -> f64 {
    mtcore::loss::ll_value(&logits, y)
}

#[pyfunction]
fn ll_grad(logits: Vec<f64>, y: Token) -> Vec<f64> {
    mtcore::loss::ll_grad(&logits, y)
}

#[pyfunction]
fn qkl_logits(logits: Vec<f64>, reference: Vec<f64>) -> (f64, Vec<f64>) {
    mtcore::divergence::qkl_logits(&logits, &reference)
}

#[pymodule]
fn meanteach(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyMtConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(mt_run, m)?)?;
    m.add_function(wrap_pyfunction!(ngd_run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(build_target, m)?)?;
    m.add_function(wrap_pyfunction!(memorization_report, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(nlul_value, m)?)?;
    m.add_function(wrap_pyfunction!(nlul_grad, m)?)?;
    m.add_function(wrap_pyfunction!(ll_value, m)?)?;
    m.add_function(wrap_pyfunction!(ll_grad, m)?)?;
    m.add_function(wrap_pyfunction!(qkl_logits, m)?)?;
    Ok(())
}
