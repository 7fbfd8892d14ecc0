//! Python bindings: models, head masks, attribution and the metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use headlrp::attribution::{self, AttributionResult, ExplainOptions, Method};
use headlrp::eval::{self, EvalConfig, EvalDataset, Example, Policy};
use headlrp::fixtures;
use headlrp::headmask::{self, MaskOptions, ParsedCorpus};
use headlrp::model::{self, Target, Task};

fn err(e: headlrp::Error) -> PyErr {
    use headlrp::Error::*;
    let msg = e.to_string();
    match e {
        NotFound { .. } => PyFileNotFoundError::new_err(msg),
        Config(_) | Data(_) | Dimension(_) => PyValueError::new_err(msg),
        Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Loads a weight manifest.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::Model::load(&path).map_err(err)?,
        })
    }

    /// The planted classifier used by the toy bundle.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn toy(seed: u64) -> Self {
        Self {
            inner: fixtures::toy_bundle(0, 0, seed).model,
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_weights(&path, self.inner.config(), self.inner.weights(), model::DType::F64).map_err(err)
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.config().num_blocks
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.config().num_heads
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.config().task.to_string()
    }

    /// `(label, confidence, logits)`; QA logits are `[start row, end row]`.
    fn predict(&self, ids: Vec<usize>) -> PyResult<(usize, f64, Vec<f64>)> {
        let p = self.inner.predict(&ids).map_err(err)?;
        Ok((p.label, p.confidence, p.logits.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(blocks={}, heads={}, hidden={}, task={})",
            c.num_blocks, c.num_heads, c.hidden_dim, c.task
        )
    }
}

#[pyclass(name = "HeadMask", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyHeadMask {
    inner: headmask::HeadMask,
}

#[pymethods]
impl PyHeadMask {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: headmask::HeadMask::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn all_ones(blocks: usize, heads: usize) -> Self {
        Self {
            inner: headmask::HeadMask::all_ones(blocks, heads),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: headmask::HeadMask::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn grid(&self) -> Vec<Vec<bool>> {
        self.inner.grid()
    }

    #[getter]
    fn ones(&self) -> usize {
        self.inner.ones()
    }

    #[getter]
    fn rate(&self) -> f64 {
        self.inner.rate()
    }

    /// Same number of heads, placed uniformly at random.
    fn random(&self, seed: u64) -> Self {
        Self {
            inner: headmask::random_mask(&self.inner, seed),
        }
    }

    /// Switches on `⌈rate · zeros⌉` masked-out heads.
    fn corrupt(&self, rate: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: headmask::corrupt_mask(&self.inner, rate, seed).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "HeadMask({}x{}, ones={})",
            self.inner.blocks(),
            self.inner.heads(),
            self.inner.ones()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (model, corpus, xi_synt = 0.1, xi_pos = 0.8, offsets = None))]
fn build_mask(
    model: &PyModel,
    corpus: PathBuf,
    xi_synt: f64,
    xi_pos: f64,
    offsets: Option<Vec<i64>>,
) -> PyResult<PyHeadMask> {
    let corpus = ParsedCorpus::load(&corpus).map_err(err)?;
    let mut options = MaskOptions {
        xi_synt,
        xi_pos,
        ..MaskOptions::default()
    };
    if let Some(o) = offsets {
        options.offsets = o;
    }
    let build = headmask::build_mask(&model.inner, &corpus, &options).map_err(err)?;
    Ok(PyHeadMask { inner: build.combined })
}

fn targets(model: &model::Model, ids: &[usize], target: Option<usize>, answer: Option<(usize, usize)>) -> PyResult<Vec<Target>> {
    Ok(match (model.config().task, target, answer) {
        (Task::Classification, Some(c), _) => vec![Target::Class(c)],
        (Task::Qa, _, Some((s, e))) => vec![Target::Start(s), Target::End(e)],
        (task, _, _) => {
            let example = match task {
                Task::Classification => Example::classification(ids.to_vec(), 0),
                Task::Qa => Example::qa(ids.to_vec(), None, 0),
            };
            eval::targets_for(model, &example).map_err(err)?
        }
    })
}

fn result_json(py: Python<'_>, r: &AttributionResult) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// Scores for one input. Without `target` the predicted class (or, for QA,
/// `answer` or the predicted span) is explained.
#[pyfunction]
#[pyo3(signature = (model, ids, method = "ours", mask = None, target = None, answer = None, seed = 0, row_normalize = false, mask_propagation = false))]
#[allow(clippy::too_many_arguments)]
fn attribute(
    py: Python<'_>,
    model: &PyModel,
    ids: Vec<usize>,
    method: &str,
    mask: Option<&PyHeadMask>,
    target: Option<usize>,
    answer: Option<(usize, usize)>,
    seed: u64,
    row_normalize: bool,
    mask_propagation: bool,
) -> PyResult<Py<PyAny>> {
    let method: Method = method.parse().map_err(err)?;
    let cfg = model.inner.config();
    let mask = match mask {
        Some(m) => m.inner.clone(),
        None if matches!(method, Method::Ours | Method::Random) => {
            return Err(PyValueError::new_err("a mask is required for ours and random"));
        }
        None => headmask::HeadMask::all_ones(cfg.num_blocks, cfg.num_heads),
    };
    let targets = targets(&model.inner, &ids, target, answer)?;
    let options = ExplainOptions {
        row_normalize,
        mask_propagation,
    };
    let result = attribution::attribute(&model.inner, &ids, &targets, method, &mask, seed, options).map_err(err)?;
    result_json(py, &result)
}

#[pyfunction]
#[pyo3(signature = (model, ids, scores, k, policy = "mask"))]
fn prune(model: &PyModel, ids: Vec<usize>, scores: Vec<f64>, k: f64, policy: &str) -> PyResult<Vec<usize>> {
    let policy: Policy = policy.parse().map_err(err)?;
    eval::prune(model.inner.config(), &ids, &scores, k, policy).map_err(err)
}

fn scored(inputs: Vec<Vec<usize>>, scores: Vec<Vec<f64>>) -> PyResult<(EvalDataset, Vec<AttributionResult>)> {
    if inputs.len() != scores.len() {
        return Err(PyValueError::new_err("one score list per input is required"));
    }
    let attributions = inputs
        .iter()
        .zip(scores)
        .map(|(ids, s)| AttributionResult {
            ids: ids.clone(),
            scores: s,
            method: Method::Ours,
            targets: Vec::new(),
            degenerate: false,
            normalization: Vec::new(),
            rollout: Vec::new(),
        })
        .collect();
    let examples = inputs.into_iter().map(|ids| Example::classification(ids, 0)).collect();
    Ok((EvalDataset::new(Task::Classification, examples), attributions))
}

/// Mean drop in the predicted class's confidence after pruning `k`%.
#[pyfunction]
#[pyo3(signature = (model, inputs, scores, k, policy = "mask"))]
fn aopc(model: &PyModel, inputs: Vec<Vec<usize>>, scores: Vec<Vec<f64>>, k: f64, policy: &str) -> PyResult<f64> {
    let (data, attr) = scored(inputs, scores)?;
    eval::aopc(&model.inner, &data, &attr, k, policy.parse().map_err(err)?).map_err(err)
}

/// Mean log ratio of confidences after and before pruning `k`%.
#[pyfunction]
#[pyo3(signature = (model, inputs, scores, k, policy = "mask"))]
fn lodds(model: &PyModel, inputs: Vec<Vec<usize>>, scores: Vec<Vec<f64>>, k: f64, policy: &str) -> PyResult<f64> {
    let (data, attr) = scored(inputs, scores)?;
    Ok(eval::lodds(&model.inner, &data, &attr, k, policy.parse().map_err(err)?)
        .map_err(err)?
        .value)
}

/// Precision@k of one QA example; `None` without a usable span.
#[pyfunction]
#[pyo3(signature = (model, ids, scores, answer, context_start, k = 20))]
fn precision_at_k(
    model: &PyModel,
    ids: Vec<usize>,
    scores: Vec<f64>,
    answer: Option<(usize, usize)>,
    context_start: usize,
    k: usize,
) -> PyResult<Option<f64>> {
    if scores.len() != ids.len() {
        return Err(PyValueError::new_err("one score per token is required"));
    }
    let example = Example::qa(ids, answer.map(|(s, e)| [s, e]), context_start);
    Ok(eval::example_precision(model.inner.config(), &example, &scores, k))
}

/// Runs the benchmark over a dataset file and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, dataset, mask = None, methods = None, k_grid = None, seeds = None))]
fn benchmark(
    model: &PyModel,
    dataset: PathBuf,
    mask: Option<&PyHeadMask>,
    methods: Option<Vec<String>>,
    k_grid: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
) -> PyResult<String> {
    let cfg = model.inner.config();
    let data = EvalDataset::load(&dataset, cfg.task).map_err(err)?;
    let mut config = EvalConfig::default();
    if let Some(m) = methods {
        config.methods = m.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(err)?;
    }
    if let Some(k) = k_grid {
        config.k_grid = k;
    }
    if let Some(s) = seeds {
        config.seeds = s;
    }
    let mask = mask
        .map(|m| m.inner.clone())
        .unwrap_or_else(|| headmask::HeadMask::all_ones(cfg.num_blocks, cfg.num_heads));
    let report = eval::run_benchmark(&model.inner, &data, &mask, &config).map_err(err)?;
    report.to_json().map_err(err)
}

#[pymodule]
#[pyo3(name = "headlrp")]
fn headlrp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyHeadMask>()?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(aopc, m)?)?;
    m.add_function(wrap_pyfunction!(lodds, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
