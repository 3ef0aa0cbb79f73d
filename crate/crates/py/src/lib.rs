//! Python bindings: corpora, checkpoints, training stages, losses and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use soa_core::autodiff::Tensor;
use soa_core::cli::{run_pipeline, ExperimentConfig};
use soa_core::eval::{self, EvalReport};
use soa_core::model::{init_params, Component, Model, ModelConfig};
use soa_core::objectives;
use soa_core::surgery::{self, ModelCheckpoint};
use soa_core::synthdata::{self, DomainSpec, Split};
use soa_core::training::{self, StageConfig};
use soa_core::SoaError;

/// Parameter name, shape and row-major values.
type NamedTensor = (String, Vec<usize>, Vec<f64>);

fn to_py(e: SoaError) -> PyErr {
    match e {
        SoaError::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (SoaError::Config { .. }
        | SoaError::Contract(_)
        | SoaError::Vocabulary(_)
        | SoaError::DegenerateInput(_)
        | SoaError::InfeasibleTarget { .. }
        | SoaError::DataContract(_)
        | SoaError::IncompatibleArchitecture(_)
        | SoaError::InputTooShort { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn domain(name: &str, seed: u64) -> PyResult<DomainSpec> {
    match name {
        "source" => Ok(DomainSpec::source(seed)),
        "target" => Ok(DomainSpec::target(seed)),
        "noisy" => Ok(DomainSpec::noisy(seed)),
        other => Err(PyValueError::new_err(format!("unknown domain `{other}` (expected source, target or noisy)"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.concat()).map_err(to_py)
}

/// A synthetic corpus of waveforms with optional transcripts.
#[pyclass(name = "Corpus", module = "soa", from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: synthdata::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (domain_name, n, min_tokens=4, max_tokens=12, labeled=true, seed=0, split="train"))]
    fn sample(
        domain_name: &str,
        n: usize,
        min_tokens: usize,
        max_tokens: usize,
        labeled: bool,
        seed: u64,
        split: &str,
    ) -> PyResult<Self> {
        let spec = domain(domain_name, seed)?;
        let split = Split::parse(split).map_err(to_py)?;
        let inner = synthdata::sample_split(&spec, split, n, (min_tokens, max_tokens), labeled, seed).map_err(to_py)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: synthdata::load_corpus(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synthdata::save_corpus(&self.inner, &path).map_err(to_py)
    }

    fn unlabeled(&self) -> Self {
        PyCorpus { inner: self.inner.unlabeled() }
    }

    fn subset(&self, fraction: f64) -> Self {
        PyCorpus { inner: self.inner.subset(fraction) }
    }

    fn waveform(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .utterances
            .get(i)
            .map(|u| u.waveform.clone())
            .ok_or_else(|| PyValueError::new_err(format!("utterance {i} out of range")))
    }

    fn transcript(&self, i: usize) -> PyResult<Option<Vec<usize>>> {
        self.inner
            .utterances
            .get(i)
            .map(|u| u.transcript.clone())
            .ok_or_else(|| PyValueError::new_err(format!("utterance {i} out of range")))
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain.clone()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Model parameters with architecture fingerprint and lineage.
#[pyclass(name = "Checkpoint", module = "soa", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialised toy model (no CTC head).
    #[staticmethod]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn init(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::toy(),
        };
        let params = init_params(&cfg, seed).map_err(to_py)?;
        Ok(PyCheckpoint { inner: ModelCheckpoint::new(cfg, params, vec![]).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: surgery::load_checkpoint(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        surgery::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn architecture_fingerprint(&self) -> String {
        self.inner.architecture_fingerprint()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.params.keys().cloned().collect()
    }

    /// Lineage as a JSON array.
    #[getter]
    fn lineage_json(&self) -> String {
        serde_json::to_string(&self.inner.lineage).expect("lineage serializes")
    }

    /// Digest of one component's parameters.
    fn component_digest(&self, component: &str) -> PyResult<String> {
        let c = Component::parse(component).map_err(to_py)?;
        Ok(self.inner.component_digest(c))
    }

    /// Flattened values of each parameter in `component`.
    fn extract(&self, component: &str) -> PyResult<Vec<NamedTensor>> {
        let part = surgery::extract_component(&self.inner, component).map_err(to_py)?;
        Ok(part.into_iter().map(|(k, t)| (k, t.shape().to_vec(), t.into_data())).collect())
    }

    /// Time-averaged feature-encoder latent of a waveform.
    fn mean_latent(&self, waveform: Vec<f64>) -> PyResult<Vec<f64>> {
        Model::new(&self.inner.config, &self.inner.params).mean_latent(&waveform).map_err(to_py)
    }

    /// Greedy transcript (symbol indices) of a waveform.
    fn transcribe(&self, waveform: Vec<f64>) -> PyResult<Vec<usize>> {
        let lp = Model::new(&self.inner.config, &self.inner.params).log_probs(&waveform).map_err(to_py)?;
        let cols = eval::greedy_ctc_decode(&lp).map_err(to_py)?;
        Ok(cols.into_iter().map(|c| c - 1).collect())
    }

    /// Corpus WER as `(wer, substitutions, insertions, deletions)`.
    fn evaluate(&self, corpus: &PyCorpus) -> PyResult<(f64, usize, usize, usize)> {
        let EvalReport { wer, substitutions, insertions, deletions, .. } =
            eval::evaluate(&self.inner, &corpus.inner).map_err(to_py)?;
        Ok((wer, substitutions, insertions, deletions))
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(label={}, params={}, digest={})",
            self.inner.label().unwrap_or("-"),
            self.inner.params.len(),
            &self.inner.digest()[..12]
        )
    }
}

/// Feature encoder (and quantizer) of `theta`, contextual encoder and CTC head of `phi`.
#[pyfunction]
fn combine(theta: &PyCheckpoint, phi: &PyCheckpoint) -> PyResult<PyCheckpoint> {
    Ok(PyCheckpoint { inner: surgery::combine(&theta.inner, &phi.inner).map_err(to_py)? })
}

/// Runs a training stage; `kind` is `pretrain`, `finetune` or `continual`.
/// Returns the new checkpoint and the per-step losses.
#[pyfunction]
#[pyo3(signature = (kind, start, corpora, steps, seed=0, stage_json=None))]
fn run_stage(
    py: Python<'_>,
    kind: &str,
    start: &PyCheckpoint,
    corpora: Vec<PyCorpus>,
    steps: usize,
    seed: u64,
    stage_json: Option<&str>,
) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let cfg = match stage_json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => match kind {
            "pretrain" => StageConfig::pretrain(steps, seed),
            "finetune" => StageConfig::finetune(steps, seed),
            "continual" => StageConfig::continual(steps, seed),
            other => return Err(PyValueError::new_err(format!("unknown stage kind `{other}`"))),
        },
    };
    let corpora: Vec<_> = corpora.into_iter().map(|c| c.inner).collect();
    let start = start.inner.clone();
    let outcome = py.detach(|| training::run_stage(&cfg, &start, &corpora)).map_err(to_py)?;
    let losses = outcome.log.iter().map(|r| r.loss).collect();
    Ok((PyCheckpoint { inner: outcome.checkpoint }, losses))
}

/// Default experiment configuration as JSON.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn toy_config_json(seed: u64) -> String {
    serde_json::to_string_pretty(&ExperimentConfig::toy(seed)).expect("config serializes")
}

/// Runs the full pipeline and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, cache_dir, config_json=None))]
fn pipeline(py: Python<'_>, out_dir: PathBuf, cache_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = match config_json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::toy(0),
    };
    let report = py.detach(|| run_pipeline(&cfg, &out_dir, &cache_dir).map(|a| a.report)).map_err(to_py)?;
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

#[pyfunction]
#[pyo3(signature = (domain_name, tokens, seed=0))]
fn synth_utterance(domain_name: &str, tokens: Vec<usize>, seed: u64) -> PyResult<Vec<f64>> {
    synthdata::synth_utterance(&domain(domain_name, seed)?, &tokens, seed).map_err(to_py)
}

#[pyfunction]
fn mix_at_snr(clean: Vec<f64>, noise: Vec<f64>, snr_db: f64) -> PyResult<Vec<f64>> {
    synthdata::mix_at_snr(&clean, &noise, snr_db).map_err(to_py)
}

/// CTC negative log-likelihood; column 0 is the blank.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    objectives::ctc_loss_value(&matrix(log_probs)?, &target).map_err(to_py)
}

#[pyfunction]
fn greedy_ctc_decode(log_probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    eval::greedy_ctc_decode(&matrix(log_probs)?).map_err(to_py)
}

/// `(wer, substitutions, insertions, deletions)`.
#[pyfunction]
fn word_error_rate(reference: Vec<i64>, hypothesis: Vec<i64>) -> PyResult<(f64, usize, usize, usize)> {
    let (w, e) = eval::word_error_rate(&reference, &hypothesis).map_err(to_py)?;
    Ok((w, e.substitutions, e.insertions, e.deletions))
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::cosine_similarity(&a, &b).map_err(to_py)
}

/// Frequencies of peaks in `curve` with at least `min_prominence`.
#[pyfunction]
#[pyo3(signature = (grid, curve, min_prominence=0.02))]
fn find_peaks(grid: Vec<f64>, curve: Vec<f64>, min_prominence: f64) -> PyResult<Vec<f64>> {
    Ok(eval::find_peaks(&grid, &curve, min_prominence).map_err(to_py)?.into_iter().map(|p| p.frequency_hz).collect())
}

#[pyfunction]
fn noam_hold_decay_lr(step: usize, warmup: usize, hold: usize, decay: usize, peak: f64, lam: f64) -> f64 {
    training::noam_hold_decay_lr(step, warmup, hold, decay, peak, lam)
}

#[pyfunction]
fn warmup_poly_lr(step: usize, total: usize, peak: f64, power: f64) -> f64 {
    training::warmup_poly_lr(step, total, peak, power)
}

#[pyfunction]
fn estimate_flops(wall_seconds: f64, n_devices: usize, device_tflops: f64) -> PyResult<f64> {
    training::estimate_flops(wall_seconds, n_devices, device_tflops).map_err(to_py)
}

#[pymodule]
fn soa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config_json, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(synth_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_ctc_decode, m)?)?;
    m.add_function(wrap_pyfunction!(word_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(find_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(noam_hold_decay_lr, m)?)?;
    m.add_function(wrap_pyfunction!(warmup_poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flops, m)?)?;
    Ok(())
}
