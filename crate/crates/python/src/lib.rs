//! Python bindings for `petl_core`.
//!
//! Arrays cross the boundary as float64 numpy arrays. Structured results
//! (parameter reports, run results, benchmark tables) come back as plain
//! dicts.

use std::path::PathBuf;

use numpy::ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use petl_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use petl_core::data::{export_toy_dataset, synthesize_toy_dataset, ToyDatasetConfig};
use petl_core::encoder::{encode, DualEncoderModel, EncoderConfig, EncoderInput};
use petl_core::objectives::{hinge_triplet, hmmc_terms, LossConfig, NegativeMode, RetrievalBatch};
use petl_core::petl::{attach_strategy, count_parameters, param_report_for, PetlStrategy, PromptDepth, StrategyKind};
use petl_core::retrieval::{mean_recall, recall_at_k, similarity_matrix, six_recalls, Direction};
use petl_core::runner::{self, GradCheckOptions, RunConfig};
use petl_core::PetlError;

create_exception!(petl_py, PetlException, PyException, "Base class of library errors.");
create_exception!(petl_py, ConfigError, PetlException, "Invalid configuration.");
create_exception!(
    petl_py,
    InputError,
    PetlException,
    "Malformed or inconsistent input data."
);
create_exception!(
    petl_py,
    NumericalError,
    PetlException,
    "Non-finite values or failed numerical checks."
);
create_exception!(petl_py, FormatError, PetlException, "Unreadable serialized data.");

fn py_err(e: PetlError) -> PyErr {
    match e {
        PetlError::Config(m) => ConfigError::new_err(m),
        PetlError::Input(m) => InputError::new_err(m),
        PetlError::Numerical(m) => NumericalError::new_err(m),
        PetlError::Format(m) => FormatError::new_err(m),
        PetlError::Io(e) => PyOSError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for petl_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| FormatError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(e.to_string()))
}

/// A dict is parsed as a config, anything else is taken as a file path.
fn run_config(obj: &Bound<'_, PyAny>) -> PyResult<RunConfig> {
    if obj.is_instance_of::<PyDict>() {
        let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
        RunConfig::from_json_str(&text).py()
    } else {
        let path: PathBuf = obj.extract()?;
        RunConfig::load(&path).py()
    }
}

fn negative_mode(mode: &str) -> PyResult<NegativeMode> {
    match mode {
        "hardest" => Ok(NegativeMode::Hardest),
        "sum" => Ok(NegativeMode::Sum),
        other => Err(ConfigError::new_err(format!("unknown negative mode {other:?}"))),
    }
}

fn direction(name: &str) -> PyResult<Direction> {
    match name {
        "image_query" | "text_retrieval" => Ok(Direction::ImageQuery),
        "text_query" | "image_retrieval" => Ok(Direction::TextQuery),
        other => Err(ConfigError::new_err(format!("unknown direction {other:?}"))),
    }
}

/// Encoder architecture. Build with `toy()`, `full_scale()` or from a dict.
#[pyclass(name = "EncoderConfig", module = "petl_py", from_py_object)]
#[derive(Clone)]
struct PyEncoderConfig(EncoderConfig);

#[pymethods]
impl PyEncoderConfig {
    #[new]
    #[pyo3(signature = (fields=None))]
    fn new(fields: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: EncoderConfig = match fields {
            Some(f) => from_py(f)?,
            None => EncoderConfig::default(),
        };
        cfg.validate().py()?;
        Ok(PyEncoderConfig(cfg))
    }

    #[staticmethod]
    fn toy() -> Self {
        PyEncoderConfig(EncoderConfig::toy())
    }

    #[staticmethod]
    fn full_scale() -> Self {
        PyEncoderConfig(EncoderConfig::full_scale())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.0.embed_dim
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }

    #[getter]
    fn context_length(&self) -> usize {
        self.0.context_length
    }

    fn __repr__(&self) -> String {
        format!(
            "EncoderConfig(layers={}, vision_width={}, text_width={}, embed_dim={})",
            self.0.layers, self.0.vision_width, self.0.text_width, self.0.embed_dim
        )
    }
}

/// A transfer strategy: which tensors are added and which are trained.
#[pyclass(name = "Strategy", module = "petl_py", from_py_object)]
#[derive(Clone)]
struct PyStrategy(PetlStrategy);

#[pymethods]
impl PyStrategy {
    #[staticmethod]
    fn zero_shot() -> Self {
        PyStrategy(PetlStrategy::zero_shot())
    }

    #[staticmethod]
    fn linear_probe() -> Self {
        PyStrategy(PetlStrategy::linear_probe())
    }

    #[staticmethod]
    fn full_finetune() -> Self {
        PyStrategy(PetlStrategy::full_finetune())
    }

    #[staticmethod]
    fn adapter_sequential(d: usize) -> Self {
        PyStrategy(PetlStrategy::adapter_sequential(d))
    }

    #[staticmethod]
    #[pyo3(signature = (d, r, tie_across_layers=true))]
    fn mrs_adapter(d: usize, r: usize, tie_across_layers: bool) -> Self {
        PyStrategy(PetlStrategy::mrs_adapter(d, r).with_tie(tie_across_layers))
    }

    #[staticmethod]
    #[pyo3(signature = (d, r, tie_across_layers=true))]
    fn mrs_no_share(d: usize, r: usize, tie_across_layers: bool) -> Self {
        PyStrategy(PetlStrategy::mrs_no_share(d, r).with_tie(tie_across_layers))
    }

    /// `kind` is one of "text_prompt", "visual_prompt", "vl_prompt".
    #[staticmethod]
    #[pyo3(signature = (kind, length, deep=true))]
    fn prompt(kind: &str, length: usize, deep: bool) -> PyResult<Self> {
        let kind = match kind {
            "text_prompt" => StrategyKind::TextPrompt,
            "visual_prompt" => StrategyKind::VisualPrompt,
            "vl_prompt" => StrategyKind::VlPrompt,
            other => return Err(ConfigError::new_err(format!("{other:?} is not a prompt strategy"))),
        };
        let depth = if deep { PromptDepth::Deep } else { PromptDepth::Shallow };
        Ok(PyStrategy(PetlStrategy::prompt(kind, length, depth)))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind.name()
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        format!("Strategy({})", self.0.label())
    }
}

/// Trainable and total parameter counts of `strategy` on `config`, from
/// shapes alone.
#[pyfunction]
fn param_report<'py>(py: Python<'py>, config: &PyEncoderConfig, strategy: &PyStrategy) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &param_report_for(&config.0, &strategy.0).py()?)
}

/// Dual encoder with an optional attached strategy.
#[pyclass(name = "Model", module = "petl_py")]
struct PyModel(DualEncoderModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyEncoderConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel(DualEncoderModel::new(config.0.clone(), seed).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(load_checkpoint(&path).py()?.model))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::new(self.0.clone())).py()
    }

    #[pyo3(signature = (strategy, seed=0))]
    fn attach(&mut self, strategy: &PyStrategy, seed: u64) -> PyResult<()> {
        attach_strategy(&mut self.0, &strategy.0, seed).py()
    }

    #[getter]
    fn config(&self) -> PyEncoderConfig {
        PyEncoderConfig(self.0.config().clone())
    }

    #[getter]
    fn strategy(&self) -> Option<PyStrategy> {
        self.0.strategy().cloned().map(PyStrategy)
    }

    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &count_parameters(&self.0))
    }

    fn param_names(&self) -> Vec<String> {
        self.0.params().iter().map(|(n, _)| n.to_string()).collect()
    }

    fn trainable_names(&self) -> Vec<String> {
        self.0.trainable_names()
    }

    fn get_param<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyArray2<f64>>> {
        Ok(self.0.param(name).py()?.clone().into_pyarray(py))
    }

    fn set_param(&mut self, name: &str, value: PyReadonlyArray2<'_, f64>) -> PyResult<()> {
        self.0.set_param(name, value.as_array().to_owned()).py()
    }

    /// Unit-norm embedding of an `H x W x 3` normalized image.
    fn encode_image<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'_, f64>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let image: Array3<f64> = image.as_array().to_owned();
        let e = py.detach(|| encode(&EncoderInput::Image(&image), &self.0, None)).py()?;
        Ok(e.0.into_pyarray(py))
    }

    /// Unit-norm embedding of token ids including BOS and EOS.
    fn encode_text<'py>(&self, py: Python<'py>, ids: Vec<usize>) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let e = py.detach(|| encode(&EncoderInput::Text(&ids), &self.0, None)).py()?;
        Ok(e.0.into_pyarray(py))
    }

    fn __repr__(&self) -> String {
        let r = count_parameters(&self.0);
        let s = self.0.strategy().map_or("none".to_string(), |s| s.label());
        format!("Model(strategy={s}, trainable={}, total={})", r.trainable, r.total)
    }
}

/// Three-term hinge loss on `B x D` unit-norm embeddings. Returns a dict
/// with `cross`, `intra_image`, `intra_text` and `total`.
#[pyfunction]
#[pyo3(signature = (v, t, v_aug, t_aug, image_ids, margin_cross=0.2, margin_image=0.2, margin_text=0.2, mode="hardest"))]
#[allow(clippy::too_many_arguments)]
fn hmmc_loss<'py>(
    py: Python<'py>,
    v: PyReadonlyArray2<'_, f64>,
    t: PyReadonlyArray2<'_, f64>,
    v_aug: PyReadonlyArray2<'_, f64>,
    t_aug: PyReadonlyArray2<'_, f64>,
    image_ids: Vec<usize>,
    margin_cross: f64,
    margin_image: f64,
    margin_text: f64,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let batch = RetrievalBatch::new(
        v.as_array().to_owned(),
        t.as_array().to_owned(),
        v_aug.as_array().to_owned(),
        t_aug.as_array().to_owned(),
        image_ids,
    )
    .py()?;
    let cfg = LossConfig {
        margin_cross,
        margin_image,
        margin_text,
        negative_mode: negative_mode(mode)?,
        ..Default::default()
    };
    let terms = hmmc_terms(&batch, &cfg).py()?;
    let out = PyDict::new(py);
    out.set_item("cross", terms.cross)?;
    out.set_item("intra_image", terms.intra_image)?;
    out.set_item("intra_text", terms.intra_text)?;
    out.set_item("total", terms.total())?;
    Ok(out)
}

/// Bidirectional triplet loss on a square score matrix and its gradient.
#[pyfunction]
#[pyo3(signature = (scores, margin, mode="hardest", labels=None))]
fn triplet_loss<'py>(
    py: Python<'py>,
    scores: PyReadonlyArray2<'_, f64>,
    margin: f64,
    mode: &str,
    labels: Option<Vec<usize>>,
) -> PyResult<(f64, Bound<'py, PyArray2<f64>>)> {
    let s: Array2<f64> = scores.as_array().to_owned();
    let (loss, grad) = hinge_triplet(&s, margin, negative_mode(mode)?, labels.as_deref()).py()?;
    Ok((loss, grad.into_pyarray(py)))
}

#[pyfunction]
fn similarity<'py>(
    py: Python<'py>,
    images: PyReadonlyArray2<'_, f64>,
    captions: PyReadonlyArray2<'_, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let s = similarity_matrix(&images.as_array().to_owned(), &captions.as_array().to_owned()).py()?;
    Ok(s.into_pyarray(py))
}

/// `direction` is "image_query" (text retrieval) or "text_query" (image
/// retrieval).
#[pyfunction]
fn recall(scores: PyReadonlyArray2<'_, f64>, caption_to_image: Vec<usize>, k: usize, direction: &str) -> PyResult<f64> {
    recall_at_k(
        &scores.as_array().to_owned(),
        &caption_to_image,
        k,
        self::direction(direction)?,
    )
    .py()
}

/// TR@1/5/10, IR@1/5/10 and their mean.
#[pyfunction]
fn retrieval_metrics<'py>(
    py: Python<'py>,
    scores: PyReadonlyArray2<'_, f64>,
    caption_to_image: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = six_recalls(&scores.as_array().to_owned(), &caption_to_image).py()?;
    let out = PyDict::new(py);
    for (name, v) in ["tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10"].iter().zip(r) {
        out.set_item(*name, v)?;
    }
    out.set_item("mr", mean_recall(&r).py()?)?;
    Ok(out)
}

/// Writes the synthetic dataset to `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, classes=8, per_class=25, captions_per_image=5, image_size=16, noise_std=0.1, seed=0))]
fn make_toy_data(
    out: PathBuf,
    classes: usize,
    per_class: usize,
    captions_per_image: usize,
    image_size: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<PathBuf> {
    let cfg = ToyDatasetConfig {
        n_classes: classes,
        items_per_class: per_class,
        captions_per_image,
        image_size,
        noise_std,
        seed,
        vocab_size: ToyDatasetConfig::default().vocab_size.max(3 * classes),
        ..Default::default()
    };
    let ds = synthesize_toy_dataset(&cfg).py()?;
    export_toy_dataset(&ds, &out).py()
}

/// The toy recipe for `strategy` as a config dict, ready to edit and pass
/// to `train`.
#[pyfunction]
fn toy_config<'py>(py: Python<'py>, strategy: &PyStrategy) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &RunConfig::toy(strategy.0.clone()))
}

/// Trains one run from a config dict or file without writing anything.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn train<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = py.detach(|| runner::train(&cfg)).py()?;
    to_py(py, &result)
}

/// Trains and writes checkpoint and report into `out` (or the config's
/// output directory). Returns the run result.
#[pyfunction]
#[pyo3(signature = (config, seed=None, out=None))]
fn run<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let art = py.detach(|| runner::run_single(&cfg)).py()?;
    to_py(py, &art.result)
}

/// Runs every config over its folds; returns rows and failures.
#[pyfunction]
fn benchmark<'py>(py: Python<'py>, configs: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfgs = configs.iter().map(run_config).collect::<PyResult<Vec<_>>>()?;
    let table = py.detach(|| runner::run_benchmark(&cfgs)).py()?;
    to_py(py, &table)
}

/// Analytic against central-difference gradients on one training batch.
#[pyfunction]
#[pyo3(signature = (config, epsilon=1e-5, max_per_tensor=None))]
fn grad_check<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    epsilon: f64,
    max_per_tensor: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = run_config(config)?;
    let opts = GradCheckOptions {
        epsilon,
        max_entries_per_tensor: max_per_tensor,
        ..Default::default()
    };
    let report = py.detach(|| runner::grad_check_with(&cfg, &opts)).py()?;
    to_py(py, &report)
}

#[pymodule]
fn petl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("PetlException", py.get_type::<PetlException>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("InputError", py.get_type::<InputError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add_class::<PyEncoderConfig>()?;
    m.add_class::<PyStrategy>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(param_report, m)?)?;
    m.add_function(wrap_pyfunction!(hmmc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_data, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
