//! Python bindings for `ipalab`.
//!
//! Configurations cross the boundary as JSON text and reports come back as
//! plain dicts, so the Python side never has to mirror the Rust structs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ipalab::augment::{sample_lambda, AugmentConfig, SpecPolicy};
use ipalab::data::{gen_corpus, make_batch, CorpusConfig};
use ipalab::ndgrad::{Graph, Tensor};
use ipalab::probe::probe_distribution;
use ipalab::trainer::{self, EvalOptions};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: ipalab::Error) -> PyErr {
    // An infeasible label here always comes from the caller's arguments.
    if e.is_validation() || matches!(e, ipalab::Error::Infeasible { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

/// A loaded corpus split, held in memory.
#[pyclass(module = "ipalab_py")]
struct Corpus {
    inner: ipalab::data::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (manifest, cmvn = true))]
    fn load(manifest: PathBuf, cmvn: bool) -> PyResult<Self> {
        let inner = ipalab::data::Corpus::load(&manifest, cmvn).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().into_iter().map(String::from).collect()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim()
    }

    /// Returns `(features, x, y)` with features as a list of frames.
    fn sample(&self, id: &str) -> PyResult<(Vec<Vec<f32>>, Vec<u32>, Vec<u32>)> {
        let s = self
            .inner
            .get(id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown utterance id {id:?}")))?;
        let frames = (0..s.features.frames).map(|t| s.features.row(t).to_vec()).collect();
        Ok((frames, s.x.clone(), s.y.clone()))
    }
}

#[pyclass(module = "ipalab_py", skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    /// Defaults for the encoder-only CTC model, overridden by `json` if given.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => trainer::TrainConfig::from_json(text).map_err(err)?,
            None => trainer::TrainConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn enc_dec() -> Self {
        Self {
            inner: trainer::TrainConfig::enc_dec(),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.max_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(module = "ipalab_py")]
struct Checkpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = trainer::Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = trainer::Checkpoint::from_bytes(data).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_bytes().map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn best_metric(&self) -> Option<f64> {
        self.inner.best_metric
    }

    #[getter]
    fn train_config(&self) -> Option<TrainConfig> {
        self.inner.train_config.clone().map(|inner| TrainConfig { inner })
    }
}

/// Writes the corpus under `out_dir` and returns `{split: manifest_path}`
/// for every non-empty split.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None, seed = 0))]
fn generate_corpus(out_dir: PathBuf, config_json: Option<&str>, seed: u64) -> PyResult<BTreeMap<String, PathBuf>> {
    let cfg: CorpusConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => CorpusConfig::default(),
    };
    gen_corpus(&cfg, seed, &out_dir).map_err(err)?;
    Ok(["train", "dev", "test"]
        .into_iter()
        .map(|split| (split.to_string(), out_dir.join(format!("{split}.jsonl"))))
        .filter(|(_, p)| p.exists())
        .collect())
}

/// Trains on the given splits. `on_event`, if given, receives every log
/// event as a dict. Returns `(report, best_checkpoint)`.
#[pyfunction]
#[pyo3(signature = (config, train, dev, on_event = None))]
fn train<'py>(
    py: Python<'py>,
    config: &TrainConfig,
    train: &Corpus,
    dev: &Corpus,
    on_event: Option<Bound<'py, PyAny>>,
) -> PyResult<(Bound<'py, PyAny>, Checkpoint)> {
    let mut callback_err: Option<PyErr> = None;
    let result = trainer::train_on(&config.inner, &train.inner, &dev.inner, &mut |ev| {
        if let (Some(f), None) = (&on_event, &callback_err) {
            if let Err(e) = to_py(py, ev).and_then(|d| f.call1((d,))) {
                callback_err = Some(e);
            }
        }
    });
    if let Some(e) = callback_err {
        return Err(e);
    }
    let (report, ck) = result.map_err(err)?;
    let summary = serde_json::json!({
        "best_wer": report.best_wer,
        "best_step": report.best_step,
        "final_wer": report.final_wer(),
        "steps": report.steps.len(),
        "stop": report.stop,
        "wall_clock_secs": report.wall_clock_secs,
    });
    Ok((to_py(py, &summary)?, Checkpoint { inner: ck }))
}

/// Decodes `corpus` with the checkpoint and returns pooled WER and hypotheses.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, checkpoint: &Checkpoint, corpus: &Corpus) -> PyResult<Bound<'py, PyAny>> {
    let cfg = checkpoint.inner.train_config.clone().unwrap_or_default();
    let ev = py
        .detach(|| trainer::evaluate(&checkpoint.inner, &corpus.inner, &EvalOptions::from_config(&cfg)))
        .map_err(err)?;
    let hyps: serde_json::Map<String, serde_json::Value> =
        ev.hypotheses.iter().map(|(id, h)| (id.clone(), h.clone().into())).collect();
    let out = serde_json::json!({
        "wer": ev.wer(),
        "edits": ev.counts.edits,
        "ref_tokens": ev.counts.ref_tokens,
        "utterances": ev.counts.utterances,
        "mean_loss": ev.mean_loss,
        "hypotheses": hyps,
    });
    to_py(py, &out)
}

/// Per-layer separation between original and interpolated encodings of the
/// first `rows` utterances of `corpus`.
#[pyfunction]
#[pyo3(signature = (checkpoint, corpus, layers, rows = 32, alpha = 0.2, gamma = 1.0, lam = None, spec_augment = false, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn probe<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    layers: Vec<usize>,
    rows: usize,
    alpha: f64,
    gamma: f64,
    lam: Option<f64>,
    spec_augment: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let ids: Vec<&str> = corpus.inner.ids().into_iter().take(rows).collect();
    let batch = make_batch(&corpus.inner, &ids).map_err(err)?;
    let aug = AugmentConfig {
        alpha,
        gamma,
        lambda_override: lam,
        spec_policy: spec_augment.then(SpecPolicy::default),
        ..AugmentConfig::default()
    };
    let report = probe_distribution(&checkpoint.inner.params, &batch, &aug, &layers, seed).map_err(err)?;
    let rows: Vec<serde_json::Value> = report
        .layers
        .iter()
        .map(|s| {
            serde_json::json!({
                "layer": s.layer,
                "centroid_dist": s.centroid_dist,
                "within_orig": s.within_orig,
                "within_mix": s.within_mix,
                "separation_ratio": s.separation_ratio,
            })
        })
        .collect();
    to_py(py, &serde_json::Value::from(rows))
}

/// Returns `(edits, reference_tokens)` for one hypothesis.
#[pyfunction]
fn wer(hyp: Vec<u32>, reference: Vec<u32>) -> PyResult<(usize, usize)> {
    trainer::wer(&hyp, &reference).map_err(err)
}

/// CTC negative log-likelihood of `label` under frame-wise log-probabilities
/// (`frames x vocab`, blank at index 0).
#[pyfunction]
fn ctc_nll(log_probs: Vec<Vec<f64>>, label: Vec<u32>) -> PyResult<f64> {
    let frames = log_probs.len();
    let vocab = log_probs.first().map_or(0, Vec::len);
    if log_probs.iter().any(|r| r.len() != vocab) {
        return Err(PyValueError::new_err("log_probs rows must have equal length"));
    }
    let t = Tensor::new(vec![frames, vocab], log_probs.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut g = Graph::<f64>::new();
    let lp = g.constant(t);
    let nll = ipalab::losses::ctc_nll(&mut g, lp, frames, &label).map_err(err)?;
    Ok(g.value(nll).item())
}

/// `n` draws from Beta(alpha, alpha) with a seeded generator.
#[pyfunction]
#[pyo3(signature = (alpha, n, seed = 0))]
fn sample_lambdas(alpha: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_lambda(alpha, &mut rng).map_err(err)).collect()
}

#[pymodule]
pub fn ipalab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_nll, m)?)?;
    m.add_function(wrap_pyfunction!(sample_lambdas, m)?)?;
    Ok(())
}
