//! Python bindings for the vqanon pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vqanon_core::anonymizer::{self, AnonymizationConfig, XVECTOR_DIM};
use vqanon_core::artifacts::read_pool;
use vqanon_core::audio::AudioClip;
use vqanon_core::config::{PipelineConfig, Profile};
use vqanon_core::evaluation;
use vqanon_core::features::{extract_all, MelAnalyzer};
use vqanon_core::pipeline::{self, SystemInputs};

create_exception!(vqanon, VqanonError, PyException);

fn err(e: vqanon_core::Error) -> PyErr {
    VqanonError::new_err(e.to_string())
}

fn parse_profile(name: &str) -> PyResult<Profile> {
    match name {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        other => Err(VqanonError::new_err(format!("unknown profile {other:?}"))),
    }
}

/// Effective pipeline configuration: profile defaults plus JSON overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (profile = "paper", overrides = None, seed = None))]
    fn new(profile: &str, overrides: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let overrides = overrides
            .map(serde_json::from_str::<serde_json::Value>)
            .transpose()
            .map_err(|e| VqanonError::new_err(e.to_string()))?;
        let inner = PipelineConfig::resolve(parse_profile(profile)?, overrides.as_ref(), seed)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| VqanonError::new_err(e.to_string()))
    }

    /// Learning rate in effect during `epoch`.
    fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.inner.training.lr_at_epoch(epoch)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(profile={:?}, seed={})",
            self.inner.profile, self.inner.seed
        )
    }
}

fn config_or_default(cfg: Option<&PyConfig>) -> PipelineConfig {
    cfg.map_or_else(PipelineConfig::default, |c| c.inner.clone())
}

/// Mel, F0, voicing and energy of a 16 kHz mono WAV.
#[pyfunction]
#[pyo3(signature = (path, utterance_id = "utt", speaker_id = "unknown"))]
fn extract_features<'py>(
    py: Python<'py>,
    path: PathBuf,
    utterance_id: &str,
    speaker_id: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let clip = AudioClip::read_wav(&path, utterance_id, speaker_id).map_err(err)?;
    let analyzer = MelAnalyzer::new(&PipelineConfig::default().features);
    let f = extract_all(&analyzer, &clip).map_err(err)?;
    let mel: Vec<Vec<f64>> = (0..f.mel.n_frames)
        .map(|t| f.mel.frame(t).to_vec())
        .collect();
    let d = PyDict::new(py);
    d.set_item("n_frames", f.mel.n_frames)?;
    d.set_item("mel", mel)?;
    d.set_item("f0_hz", f.prosody.f0_hz)?;
    d.set_item("voiced", f.prosody.voiced)?;
    d.set_item("energy", f.prosody.energy)?;
    Ok(d)
}

/// `(eer_percent, threshold)` for the given target and nontarget scores.
#[pyfunction]
fn compute_eer(targets: Vec<f64>, nontargets: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = evaluation::eer_from_scores(&targets, &nontargets).map_err(err)?;
    Ok((r.eer_percent, r.threshold))
}

/// UAR in percent from a confusion matrix indexed `[true][predicted]`.
#[pyfunction]
fn compute_uar(confusion: Vec<Vec<u64>>) -> PyResult<f64> {
    evaluation::uar_from_confusion(&confusion).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (speaker_id, dim = XVECTOR_DIM))]
fn stub_xvector(speaker_id: &str, dim: usize) -> Vec<f64> {
    anonymizer::stub_xvector(speaker_id, "", dim).values
}

/// Pseudo-x-vector averaged over speakers drawn from the farthest pool entries.
#[pyfunction]
#[pyo3(signature = (source, utterance_id, pool_path, seed = 0, n_far = 200, n_select = 100))]
fn select_pseudo_xvector<'py>(
    py: Python<'py>,
    source: Vec<f64>,
    utterance_id: &str,
    pool_path: PathBuf,
    seed: u64,
    n_far: usize,
    n_select: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let pool = read_pool(&pool_path).map_err(err)?;
    let cfg = AnonymizationConfig {
        n_far,
        n_select,
        rng_seed: seed,
        ..Default::default()
    };
    let s = anonymizer::select_pseudo_xvector(&source, utterance_id, &pool, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pseudo", s.pseudo)?;
    d.set_item("far_speaker_ids", s.far_speaker_ids)?;
    d.set_item("selected_speaker_ids", s.selected_speaker_ids)?;
    Ok(d)
}

/// Writes the synthetic two-speaker corpus; returns `(utterance_id, speaker_id)` pairs.
#[pyfunction]
#[pyo3(signature = (out, per_speaker = 4, seed = 0))]
fn make_corpus(out: PathBuf, per_speaker: usize, seed: u64) -> PyResult<Vec<(String, String)>> {
    Ok(vqanon_core::corpus::make_corpus(&out, per_speaker, seed)
        .map_err(err)?
        .utterances)
}

/// Feature caches for every WAV under `input`; returns the ids of skipped files.
#[pyfunction]
#[pyo3(signature = (input, out, config = None))]
fn features(
    py: Python<'_>,
    input: PathBuf,
    out: PathBuf,
    config: Option<PyConfig>,
) -> PyResult<(usize, Vec<String>)> {
    let cfg = config_or_default(config.as_ref());
    let s = py
        .detach(|| pipeline::cmd_features(&input, &out, &cfg))
        .map_err(err)?;
    Ok((
        s.rows.len(),
        s.skipped.into_iter().map(|k| k.item).collect(),
    ))
}

/// Trains (or resumes) into `out`; returns the mel L1 of every step run.
#[pyfunction]
#[pyo3(signature = (features, out, config = None, xvectors = None))]
fn train(
    py: Python<'_>,
    features: PathBuf,
    out: PathBuf,
    config: Option<PyConfig>,
    xvectors: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let cfg = config_or_default(config.as_ref());
    let s = py
        .detach(|| pipeline::cmd_train(&features, xvectors.as_deref(), &out, &cfg, |_| {}))
        .map_err(err)?;
    Ok(s.reports.iter().map(|r| r.mel_l1).collect())
}

/// Anonymizes every cached utterance; returns the sidecar records as JSON strings.
#[pyfunction]
#[pyo3(signature = (features, xvectors, pool, checkpoint, system, out, config = None))]
#[allow(clippy::too_many_arguments)]
fn anonymize(
    py: Python<'_>,
    features: PathBuf,
    xvectors: PathBuf,
    pool: PathBuf,
    checkpoint: PathBuf,
    system: u8,
    out: PathBuf,
    config: Option<PyConfig>,
) -> PyResult<Vec<String>> {
    let cfg = config_or_default(config.as_ref());
    let s = py
        .detach(|| {
            pipeline::cmd_anonymize(&features, &xvectors, &pool, &checkpoint, system, &out, &cfg)
        })
        .map_err(err)?;
    s.records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| VqanonError::new_err(e.to_string())))
        .collect()
}

/// Ranked EER/UAR table for `{system: trials_path}` with optional emotion files.
#[pyfunction]
#[pyo3(signature = (trials, emotion = None, out = None))]
fn evaluate(
    trials: BTreeMap<String, PathBuf>,
    emotion: Option<BTreeMap<String, PathBuf>>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let emotion = emotion.unwrap_or_default();
    let inputs: Vec<SystemInputs> = trials
        .into_iter()
        .map(|(name, trials)| SystemInputs {
            emotion: emotion.get(&name).cloned(),
            name,
            trials,
        })
        .collect();
    Ok(pipeline::cmd_evaluate(&inputs, out.as_deref())
        .map_err(err)?
        .table)
}

#[pymodule]
fn vqanon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VqanonError", m.py().get_type::<VqanonError>())?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_uar, m)?)?;
    m.add_function(wrap_pyfunction!(stub_xvector, m)?)?;
    m.add_function(wrap_pyfunction!(select_pseudo_xvector, m)?)?;
    m.add_function(wrap_pyfunction!(make_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(anonymize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
