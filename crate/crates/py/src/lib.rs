//! Python bindings: config handling, the reward functions, the sprite world
//! and the pretrain, finetune and eval commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rpo_core::config::RunConfig;
use rpo_core::reward::{self, ScorePair};
use rpo_core::run;
use rpo_core::world::{build_world, Context, PromptSpec, SubjectWorld};
use rpo_core::RpoError;

fn to_py(e: RpoError) -> PyErr {
    match e {
        RpoError::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e if e.exit_code() == 2 => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration. Edit through TOML text or the exposed fields.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn pretrain_steps(&self) -> usize {
        self.inner.pretrain.steps
    }

    #[setter]
    fn set_pretrain_steps(&mut self, steps: usize) {
        self.inner.pretrain.steps = steps;
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.train.max_steps
    }

    #[setter]
    fn set_max_steps(&mut self, steps: usize) {
        self.inner.train.max_steps = steps;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, hash={})",
            self.inner.seed,
            &self.inner.content_hash()[..8]
        )
    }
}

/// Synthetic sprite world with one held-out subject.
#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: SubjectWorld,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (n_subjects = 12, seed = 0))]
    fn new(n_subjects: usize, seed: u64) -> PyResult<Self> {
        build_world(n_subjects, seed).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn held_out(&self) -> String {
        self.inner.held_out.clone()
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// Reference renders of a subject as flat 16x16 pixel lists.
    #[pyo3(signature = (subject_id, n = 4, seed = 0))]
    fn reference_images(&self, subject_id: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let s = self.inner.subject(subject_id).map_err(to_py)?;
        Ok(self
            .inner
            .reference_images(s, n, seed)
            .into_iter()
            .map(|r| r.pixels)
            .collect())
    }

    /// One render of a subject, in a context slot when given.
    #[pyo3(signature = (subject_id, context = None, seed = 0))]
    fn render(&self, subject_id: &str, context: Option<usize>, seed: u64) -> PyResult<Vec<f64>> {
        let s = self.inner.subject(subject_id).map_err(to_py)?;
        let prompt = match context {
            Some(c) => PromptSpec::in_context(s.subject_id.clone(), Context(c)),
            None => self.inner.subject_prompt(s),
        };
        let mut rng = rpo_core::rng::stream(seed, 0);
        self.inner.render(s, &prompt, &mut rng).map(|r| r.pixels).map_err(to_py)
    }
}

#[pyfunction]
fn harmonic_reward(align_i: f64, align_t: f64, lam: f64) -> f64 {
    reward::harmonic_reward(ScorePair { align_i, align_t }, lam)
}

#[pyfunction]
fn arithmetic_reward(align_i: f64, align_t: f64, lam: f64) -> f64 {
    reward::arithmetic_reward(ScorePair { align_i, align_t }, lam)
}

/// Probability that the first of two rewards is preferred.
#[pyfunction]
fn bt_probability(r_a: f64, r_b: f64) -> f64 {
    reward::bt_probability(r_a, r_b)
}

/// Pretrains a base model; returns the checkpoint path.
#[pyfunction]
fn pretrain(py: Python<'_>, config: PyConfig, output: PathBuf) -> PyResult<PathBuf> {
    py.detach(|| run::cmd_pretrain(&config.inner, &output))
        .map(|r| r.checkpoint)
        .map_err(to_py)
}

/// Finetunes a base checkpoint; returns the selected checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, output, base, subject = None, no_early_stop = false))]
fn finetune(
    py: Python<'_>,
    config: PyConfig,
    output: PathBuf,
    base: PathBuf,
    subject: Option<String>,
    no_early_stop: bool,
) -> PyResult<PathBuf> {
    py.detach(|| run::cmd_finetune(&config.inner, &output, &base, subject.as_deref(), no_early_stop))
        .map(|r| r.selected)
        .map_err(to_py)
}

/// Evaluates a checkpoint, or an untrained model when none is given.
#[pyfunction]
#[pyo3(signature = (config, output, checkpoint = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: PyConfig,
    output: PathBuf,
    checkpoint: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| run::cmd_eval(&config.inner, &output, checkpoint.as_deref(), None))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("image_sim", r.report.image_sim)?;
    d.set_item("text_sim", r.report.text_sim)?;
    d.set_item("harmonic_03", r.report.harmonic_03)?;
    d.set_item("n_images", r.report.n_images)?;
    d.set_item("config_hash", r.report.config_hash)?;
    d.set_item("run_dir", r.dir)?;
    Ok(d)
}

#[pymodule]
pub fn rpo_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(harmonic_reward, m)?)?;
    m.add_function(wrap_pyfunction!(arithmetic_reward, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
