//! Python bindings for halprobe.
//!
//! Structured results (reports, histories, manifest entries) cross the
//! boundary as plain dicts and lists.

use std::path::PathBuf;
use std::str::FromStr;

use halprobe::attribution::{render_heatmap as render, HeatmapFormat, TokenScoreRecord};
use halprobe::labeling::{assign_binary_labels, compute_medians, hallucination_rate, FormKind, Grouping, TargetMetric};
use halprobe::probe::{self as core_probe, Backbone, Mode, ProbeParams};
use halprobe::store::{self, DatasetView as CoreView, Filter};
use halprobe::trainer::{self, LabeledData, SplitSpec, TargetSpec, TrainConfig};
use halprobe::{baselines, feature_select, metrics, synthetic, Matrix};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(halprobe, HalprobeError, PyValueError, "Invalid input to a halprobe operation.");
create_exception!(halprobe, FormatError, HalprobeError, "A file is malformed or truncated.");

fn err(e: halprobe::Error) -> PyErr {
    match e {
        halprobe::Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_format() => FormatError::new_err(e.to_string()),
        e => HalprobeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for halprobe::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| HalprobeError::new_err(e.to_string()))
}

fn parse<T: FromStr<Err = halprobe::Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows).py()
}

/// Labels as Python ints rather than `bytes`.
fn ints(v: Vec<u8>) -> Vec<u32> {
    v.into_iter().map(u32::from).collect()
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// One activation vector with its record id, layer and model tag.
#[pyclass(module = "halprobe", frozen, from_py_object)]
#[derive(Clone)]
struct ActivationRecord {
    inner: store::ActivationRecord,
}

#[pymethods]
impl ActivationRecord {
    #[new]
    #[pyo3(signature = (record_id, layer, hidden, model_tag = 0))]
    fn new(record_id: u64, layer: u16, hidden: Vec<f32>, model_tag: u16) -> Self {
        ActivationRecord {
            inner: store::ActivationRecord::new(record_id, layer, model_tag, hidden),
        }
    }

    #[getter]
    fn record_id(&self) -> u64 {
        self.inner.record_id
    }

    #[getter]
    fn layer(&self) -> u16 {
        self.inner.layer_index
    }

    #[getter]
    fn model_tag(&self) -> u16 {
        self.inner.model_tag
    }

    #[getter]
    fn hidden(&self) -> Vec<f32> {
        self.inner.hidden.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "ActivationRecord(record_id={}, layer={}, dim={})",
            self.inner.record_id,
            self.inner.layer_index,
            self.inner.hidden.len()
        )
    }
}

/// Reads every record of an `.actv` file.
#[pyfunction]
fn read_activations(py: Python<'_>, path: PathBuf) -> PyResult<Vec<ActivationRecord>> {
    let records = py
        .detach(|| store::open_activation_path(&path).and_then(|r| r.read_all()))
        .py()?;
    Ok(records.into_iter().map(|inner| ActivationRecord { inner }).collect())
}

/// Writes records as an `.actv` file and returns its size in bytes.
#[pyfunction]
fn write_activations(path: PathBuf, records: Vec<ActivationRecord>, hidden_dim: usize) -> PyResult<u64> {
    let records: Vec<_> = records.into_iter().map(|r| r.inner).collect();
    store::write_activation_path(&records, hidden_dim, path).py()
}

/// Query metadata and metric scores, one entry per record id.
#[pyclass(module = "halprobe")]
struct Manifest {
    inner: store::Manifest,
}

#[pymethods]
impl Manifest {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Manifest {
            inner: store::Manifest::read_path(path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_path(path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.entries)
    }

    /// Sets each entry's label from its metric scores (discarded entries get
    /// none) and returns per-task counts.
    #[pyo3(signature = (grouping = "per_task"))]
    fn label<'py>(&mut self, py: Python<'py>, grouping: &str) -> PyResult<Bound<'py, PyAny>> {
        let medians = compute_medians(&self.inner.entries, parse::<Grouping>(grouping)?).py()?;
        let (entries, report) = assign_binary_labels(&self.inner.entries, &medians).py()?;
        self.inner.entries = entries;
        to_py(py, &report)
    }

    fn hallucination_rates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &hallucination_rate(&self.inner.entries))
    }

    fn __repr__(&self) -> String {
        format!("Manifest({} entries)", self.inner.entries.len())
    }
}

/// Activation records joined with their manifest entries.
#[pyclass(module = "halprobe", frozen)]
struct DatasetView {
    inner: CoreView,
}

fn filters(specs: Vec<String>) -> PyResult<Vec<Filter>> {
    specs.iter().map(|s| parse::<Filter>(s)).collect()
}

#[pymethods]
impl DatasetView {
    /// Joins an `.actv` file with a manifest, then applies `FIELD=VALUE` filters.
    #[staticmethod]
    #[pyo3(signature = (activations, manifest, filters = Vec::new()))]
    fn load(py: Python<'_>, activations: PathBuf, manifest: PathBuf, filters: Vec<String>) -> PyResult<Self> {
        let wanted = self::filters(filters)?;
        let inner = py
            .detach(|| -> halprobe::Result<CoreView> {
                let reader = store::open_activation_path(&activations)?;
                let dim = reader.header().hidden_dim as usize;
                let records = reader.read_all()?;
                let manifest = store::Manifest::read_path(&manifest)?;
                let (view, _) = store::join(records, dim, &manifest)?;
                view.filter(&wanted)
            })
            .py()?;
        Ok(DatasetView { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    fn layers(&self) -> Vec<u16> {
        self.inner.layers().into_iter().collect()
    }

    fn record_ids(&self) -> Vec<u64> {
        self.inner.record_ids()
    }

    fn labels(&self) -> PyResult<Vec<u32>> {
        self.inner.labels().py().map(ints)
    }

    fn features(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.features())
    }

    fn filter(&self, filters: Vec<String>) -> PyResult<Self> {
        Ok(DatasetView {
            inner: self.inner.filter(&self::filters(filters)?).py()?,
        })
    }

    /// Samples that carry a label.
    fn labeled(&self) -> Self {
        DatasetView {
            inner: self.inner.retain("labeled", |s| s.entry.label.is_some()),
        }
    }

    /// Train, val and test views. Every layer of a record lands in the same part.
    #[pyo3(signature = (train = 0.8, val = 0.1, test = 0.1, seed = 42, stratify = true))]
    fn split(&self, train: f64, val: f64, test: f64, seed: u64, stratify: bool) -> PyResult<(Self, Self, Self)> {
        let spec = SplitSpec {
            train,
            val,
            test,
            seed,
            stratify,
        };
        let [a, b, c] = trainer::split(&self.inner, &spec).py()?;
        Ok((DatasetView { inner: a }, DatasetView { inner: b }, DatasetView { inner: c }))
    }

    fn __repr__(&self) -> String {
        format!("DatasetView({} samples, d={})", self.inner.len(), self.inner.hidden_dim())
    }
}

/// Trained or freshly initialized probe parameters.
#[pyclass(module = "halprobe", frozen)]
struct Probe {
    inner: ProbeParams,
}

fn mode_of(params: &ProbeParams) -> PyResult<Mode> {
    Mode::from_output_dim(params.output_dim()).py()
}

#[pymethods]
impl Probe {
    /// Training initialization: uniform fan-in weights with a zero output layer.
    #[new]
    #[pyo3(signature = (input_dim, hidden_dim = 11008, mode = "cls", backbone = "gated", seed = 42))]
    fn new(input_dim: usize, hidden_dim: usize, mode: &str, backbone: &str, seed: u64) -> PyResult<Self> {
        let mode = parse::<Mode>(mode)?;
        Ok(Probe {
            inner: core_probe::init_params(input_dim, hidden_dim, mode.output_dim(), parse::<Backbone>(backbone)?, seed)
                .py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Probe {
            inner: core_probe::load_params_path(path).py()?,
        })
    }

    /// Writes the parameter file and returns its size in bytes.
    fn save(&self, path: PathBuf) -> PyResult<u64> {
        core_probe::save_params_path(&self.inner, path).py()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn backbone(&self) -> String {
        self.inner.backbone().to_string()
    }

    #[getter]
    fn mode(&self) -> PyResult<&'static str> {
        Ok(match mode_of(&self.inner)? {
            Mode::Classification => "cls",
            Mode::Regression => "reg",
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Raw outputs, one row per input row.
    fn logits(&self, py: Python<'_>, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(features, self.inner.input_dim())?;
        Ok(nested(&py.detach(|| trainer::infer(&self.inner, &x)).py()?))
    }

    /// Class labels for a classification probe, scores for a regression one.
    fn predict<'py>(&self, py: Python<'py>, features: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
        let x = matrix(features, self.inner.input_dim())?;
        let logits = py.detach(|| trainer::infer(&self.inner, &x)).py()?;
        match core_probe::predict(&logits, mode_of(&self.inner)?).py()? {
            core_probe::Prediction::Classes(c) => ints(c).into_pyobject(py).map(Bound::into_any),
            core_probe::Prediction::Scores(s) => s.into_pyobject(py).map(Bound::into_any),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Probe({}, d={}, h={}, C={})",
            self.inner.backbone(),
            self.inner.input_dim(),
            self.inner.hidden_dim(),
            self.inner.output_dim()
        )
    }
}

fn target_spec(metric: Option<&str>, form: &str) -> PyResult<TargetSpec> {
    Ok(match metric {
        None => TargetSpec::Labels,
        Some(m) => TargetSpec::Golden {
            metric: parse::<TargetMetric>(m)?,
            form: parse::<FormKind>(form)?,
        },
    })
}

/// Trains a probe on `view`, scoring `val` after every epoch when given.
///
/// Without `target_metric` the probe classifies binary labels; with it, the
/// probe regresses that golden score in `target_form`, fitted on `view`.
/// Returns the probe and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (
    view, *, val = None, target_metric = None, target_form = "absolute", hidden_dim = 11008,
    backbone = "gated", epochs = 10, batch_size = 128, lr = 1e-5, weight_decay = 0.01, seed = 42,
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    view: &DatasetView,
    val: Option<&DatasetView>,
    target_metric: Option<&str>,
    target_form: &str,
    hidden_dim: usize,
    backbone: &str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> PyResult<(Probe, Bound<'py, PyAny>)> {
    let spec = target_spec(target_metric, target_form)?;
    let backbone = parse::<Backbone>(backbone)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        base_lr: lr,
        weight_decay,
        seed,
        mode: spec.mode(),
        ..TrainConfig::default()
    };
    let held: Vec<&CoreView> = val.map(|v| &v.inner).into_iter().collect();
    let (params, history) = py
        .detach(|| -> halprobe::Result<_> {
            let (tr, others, _) = spec.build(&view.inner, &held)?;
            let params = core_probe::init_params(
                view.inner.hidden_dim(),
                hidden_dim,
                spec.mode().output_dim(),
                backbone,
                seed,
            )?;
            trainer::train(&config, &tr, others.first(), params)
        })
        .py()?;
    Ok((Probe { inner: params }, to_py(py, &history)?))
}

/// Scores `probe` on `view`. Regression probes need `target_metric`; the
/// form is fitted on `fit_on`, which defaults to `view`.
#[pyfunction]
#[pyo3(signature = (probe, view, *, target_metric = None, target_form = "absolute", fit_on = None))]
fn evaluate<'py>(
    py: Python<'py>,
    probe: &Probe,
    view: &DatasetView,
    target_metric: Option<&str>,
    target_form: &str,
    fit_on: Option<&DatasetView>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = mode_of(&probe.inner)?;
    let spec = match (mode, target_metric) {
        (Mode::Classification, None) => TargetSpec::Labels,
        (Mode::Classification, Some(_)) => {
            return Err(HalprobeError::new_err("target_metric only applies to regression probes"))
        }
        (Mode::Regression, None) => return Err(HalprobeError::new_err("this regression probe needs target_metric")),
        (Mode::Regression, m) => target_spec(m, target_form)?,
    };
    let fit = fit_on.map_or(&view.inner, |v| &v.inner);
    let report = py
        .detach(|| -> halprobe::Result<_> {
            let data: LabeledData = if std::ptr::eq(fit, &view.inner) {
                spec.build(fit, &[])?.0
            } else {
                spec.build(fit, &[&view.inner])?.1.remove(0)
            };
            trainer::evaluate(&probe.inner, &data, mode)
        })
        .py()?;
    to_py(py, &report)
}

/// ROUGE-L precision, recall and F1 over lowercased alphanumeric tokens.
#[pyfunction]
fn rouge_l<'py>(py: Python<'py>, candidate: &str, reference: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::rouge_l(candidate, reference))
}

/// Mutual information in nats between one feature and binary labels.
#[pyfunction]
#[pyo3(signature = (feature, labels, neighbors = feature_select::DEFAULT_NEIGHBORS, seed = feature_select::DEFAULT_JITTER_SEED))]
fn mutual_information(feature: Vec<f64>, labels: Vec<u8>, neighbors: usize, seed: u64) -> PyResult<f64> {
    Ok(feature_select::mi_knn(&feature, &labels, neighbors, seed).py()?.value)
}

/// Ranks every dimension of a labeled view by mutual information with the label.
#[pyfunction]
#[pyo3(signature = (view, neighbors = feature_select::DEFAULT_NEIGHBORS, seed = feature_select::DEFAULT_JITTER_SEED))]
fn rank_neurons<'py>(py: Python<'py>, view: &DatasetView, neighbors: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let labels = view.inner.labels().py()?;
    let x = view.inner.features();
    let result = py
        .detach(|| feature_select::rank_features(&x, &labels, neighbors, seed))
        .py()?;
    to_py(py, &result)
}

/// Fits the perplexity threshold on training values and labels.
#[pyfunction]
fn fit_ppl_threshold<'py>(py: Python<'py>, ppl: Vec<f64>, labels: Vec<u8>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &baselines::fit_ppl_threshold(&ppl, &labels).py()?)
}

/// Applies a model returned by [`fit_ppl_threshold`].
#[pyfunction]
fn apply_ppl_threshold(model: &Bound<'_, PyAny>, ppl: Vec<f64>) -> PyResult<Vec<u32>> {
    let model: baselines::ThresholdModel = from_py(model)?;
    Ok(ints(baselines::apply_threshold(&model, &ppl)))
}

/// Renders token-score records (dicts with `record_id`, `tokens`, `scores`
/// and optional `reply`, `hallucinated_spans`) as HTML or ANSI text.
#[pyfunction]
#[pyo3(signature = (records, format = "html"))]
fn render_heatmap(records: &Bound<'_, PyAny>, format: &str) -> PyResult<String> {
    let records: Vec<TokenScoreRecord> = from_py(records)?;
    for r in &records {
        r.validate().py()?;
    }
    Ok(render(&records, parse::<HeatmapFormat>(format)?))
}

/// Writes `acts.actv` and `manifest.jsonl` with planted class structure into
/// `directory` and returns both paths.
#[pyfunction]
#[pyo3(signature = (
    directory, *, records = 400, hidden_dim = 64, signal_dims = 8, shift = 1.0,
    layers = vec![(0, true)], with_labels = false, seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn planted_fixture(
    directory: PathBuf,
    records: usize,
    hidden_dim: usize,
    signal_dims: usize,
    shift: f64,
    layers: Vec<(u16, bool)>,
    with_labels: bool,
    seed: u64,
) -> PyResult<(PathBuf, PathBuf)> {
    let spec = synthetic::FixtureSpec {
        records,
        hidden_dim,
        signal_dims,
        shift,
        layers,
        with_labels,
        seed,
    };
    let (recs, manifest) = synthetic::planted_fixture(&spec).py()?;
    let actv = directory.join("acts.actv");
    let jsonl = directory.join("manifest.jsonl");
    store::write_activation_path(&recs, hidden_dim, &actv).py()?;
    manifest.write_path(&jsonl).py()?;
    Ok((actv, jsonl))
}

#[pymodule]
#[pyo3(name = "halprobe")]
pub fn halprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("HalprobeError", py.get_type::<HalprobeError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add_class::<ActivationRecord>()?;
    m.add_class::<Manifest>()?;
    m.add_class::<DatasetView>()?;
    m.add_class::<Probe>()?;
    m.add_function(wrap_pyfunction!(read_activations, m)?)?;
    m.add_function(wrap_pyfunction!(write_activations, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(rank_neurons, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ppl_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(apply_ppl_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(render_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(planted_fixture, m)?)?;
    Ok(())
}
