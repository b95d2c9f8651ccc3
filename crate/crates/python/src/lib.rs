//! Python bindings: phantoms, models, training, inference and Dice.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use infinet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use infinet::gradcheck::GradCheckConfig;
use infinet::gradsuite::{known_op, run_check};
use infinet::inference::{aggregate_views, argmax_labels, segment_view, DiceReport, ProbabilityVolume};
use infinet::phantom::PhantomSpec;
use infinet::training::{parse_config, ModelSpec, TrainConfig, TrainError, Trainer};
use infinet::volume::{extract_slice, read_volume, write_volume, Axis, LabeledVolume, VolumeError};
use infinet::{Arch, GdlOptions, InfiNet, InfiNetConfig, Shape, Tape, Tensor, TensorError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn volume_err(e: VolumeError) -> PyErr {
    match e {
        VolumeError::Io(e) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn tensor_err(e: TensorError) -> PyErr {
    match e {
        TensorError::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn train_err(e: TrainError) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        value_err(e)
    }
}

fn parse_axis(s: &str) -> PyResult<Axis> {
    s.parse().map_err(PyValueError::new_err)
}

fn parse_arch(s: &str) -> PyResult<Arch> {
    match s {
        "dual-arm" | "dual" => Ok(Arch::DualArm),
        "single-arm" | "single" => Ok(Arch::SingleArm),
        other => Err(PyValueError::new_err(format!("unknown arch `{other}`"))),
    }
}

type SliceData = (Vec<f32>, Vec<f32>, Vec<u8>, usize, usize);

/// Co-registered T1/T2 intensities with labels.
#[pyclass(name = "Volume", module = "infinet_py", from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: LabeledVolume,
}

#[pymethods]
impl PyVolume {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        read_volume(path).map(|inner| Self { inner }).map_err(volume_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_volume(&self.inner, path).map_err(volume_err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.dims;
        (d, h, w)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn spec_id(&self) -> String {
        self.inner.spec_id.clone()
    }

    fn t1(&self) -> Vec<f32> {
        self.inner.t1.clone()
    }

    fn t2(&self) -> Vec<f32> {
        self.inner.t2.clone()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }

    /// `(t1, t2, labels, height, width)` of one slice.
    fn slice(&self, axis: &str, index: usize) -> PyResult<SliceData> {
        let s = extract_slice(&self.inner, parse_axis(axis)?, index).map_err(volume_err)?;
        Ok((s.t1, s.t2, s.labels, s.height, s.width))
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims={:?}, seed={}, spec={:?})",
            self.inner.dims, self.inner.seed, self.inner.spec_id
        )
    }
}

/// Synthetic iso-intense phantom. `spec` is `key = value` text.
#[pyfunction]
#[pyo3(signature = (seed, dims = None, spec = None))]
fn generate_phantom(seed: u64, dims: Option<(usize, usize, usize)>, spec: Option<&str>) -> PyResult<PyVolume> {
    let mut s = match spec {
        Some(text) => PhantomSpec::from_kv(text).map_err(value_err)?,
        None => PhantomSpec::default(),
    };
    if let Some((d, h, w)) = dims {
        s.dims = [d, h, w];
    }
    infinet::phantom::generate_phantom(&s, seed)
        .map(|inner| PyVolume { inner })
        .map_err(value_err)
}

#[pyclass(name = "Model", module = "infinet_py", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: InfiNet<f32>,
    seed: u64,
    view: Option<Axis>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch = "dual-arm", num_classes = 4, base_channels = 64, depth = 3, seed = 0))]
    fn new(arch: &str, num_classes: usize, base_channels: usize, depth: usize, seed: u64) -> PyResult<Self> {
        let cfg = InfiNetConfig {
            num_classes,
            base_channels,
            depth,
            ..InfiNetConfig::default()
        };
        let inner = InfiNet::new(cfg, parse_arch(arch)?, seed).map_err(tensor_err)?;
        Ok(Self {
            inner,
            seed,
            view: None,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(value_err)?;
        Ok(Self {
            inner: ck.model,
            seed: ck.seed,
            view: ck.view,
        })
    }

    /// Saves the weights alone; training state is not included.
    fn save(&self, path: &str) -> PyResult<()> {
        let mut ck = Checkpoint::from_model(self.inner.clone(), self.seed);
        ck.view = self.view;
        save_checkpoint(&ck, path).map_err(value_err)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        match self.inner.arch() {
            Arch::DualArm => "dual-arm",
            Arch::SingleArm => "single-arm",
        }
    }

    #[getter]
    fn view(&self) -> Option<&'static str> {
        self.view.map(Axis::name)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    /// `(trainable, total)`; total adds BN running statistics.
    fn count_parameters(&self) -> (usize, usize) {
        self.inner.count_parameters()
    }

    /// Class probabilities, flattened `n x classes x h x w`, for flattened
    /// `n x 1 x h x w` inputs.
    fn predict(&self, t1: Vec<f32>, t2: Vec<f32>, n: usize, h: usize, w: usize) -> PyResult<Vec<f32>> {
        let shape = Shape::new(n, 1, h, w);
        let a = Tensor::from_vec(shape, t1).map_err(tensor_err)?;
        let b = Tensor::from_vec(shape, t2).map_err(tensor_err)?;
        let p = self.inner.predict(&a, &b).map_err(tensor_err)?;
        Ok(p.data().to_vec())
    }

    fn __repr__(&self) -> String {
        let (t, _) = self.inner.count_parameters();
        format!("Model(arch={}, parameters={t})", self.arch())
    }
}

/// Trains one view. `config` is `key = value` text; keyword arguments
/// override it. Returns the model and the JSON training report.
#[pyfunction]
#[pyo3(signature = (volumes, config = None, view = None, max_epochs = None, seed = None, base_channels = None, checkpoint = None))]
fn train(
    volumes: Vec<PyVolume>,
    config: Option<&str>,
    view: Option<&str>,
    max_epochs: Option<usize>,
    seed: Option<u64>,
    base_channels: Option<usize>,
    checkpoint: Option<&str>,
) -> PyResult<(PyModel, String)> {
    let (mut cfg, mut spec) = match config {
        Some(text) => parse_config(text).map_err(train_err)?,
        None => (TrainConfig::default(), ModelSpec::default()),
    };
    if let Some(v) = view {
        cfg.view_axis = parse_axis(v)?;
    }
    if let Some(e) = max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = base_channels {
        spec.config = spec.config.with_base_channels(b);
    }
    let vols: Vec<LabeledVolume> = volumes.into_iter().map(|v| v.inner).collect();
    let mut trainer = Trainer::new(&vols, spec, cfg).map_err(train_err)?;
    let report = trainer.run(checkpoint.map(std::path::Path::new)).map_err(train_err)?;
    let seed = trainer.config().seed;
    let view = Some(trainer.config().view_axis);
    let model = PyModel {
        inner: trainer.into_model(),
        seed,
        view,
    };
    Ok((model, report.to_json()))
}

/// Per-class probability volume, `classes x D x H x W`.
#[pyclass(name = "Probabilities", module = "infinet_py", from_py_object)]
#[derive(Clone)]
pub struct PyProbabilities {
    inner: ProbabilityVolume,
}

#[pymethods]
impl PyProbabilities {
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.dims;
        (d, h, w)
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn argmax(&self) -> Vec<u8> {
        argmax_labels(&self.inner)
    }

    fn max_normalization_error(&self) -> f64 {
        self.inner.max_normalization_error()
    }
}

/// Whole-volume inference along one axis.
#[pyfunction]
#[pyo3(signature = (model, volume, axis = "axial", batch = 8))]
fn segment(model: &PyModel, volume: &PyVolume, axis: &str, batch: usize) -> PyResult<PyProbabilities> {
    segment_view(&model.inner, &volume.inner, parse_axis(axis)?, batch)
        .map(|inner| PyProbabilities { inner })
        .map_err(value_err)
}

/// Voxel-wise mean of per-view probabilities.
#[pyfunction]
fn aggregate(views: Vec<PyProbabilities>) -> PyResult<PyProbabilities> {
    let refs: Vec<&ProbabilityVolume> = views.iter().map(|v| &v.inner).collect();
    aggregate_views(&refs)
        .map(|inner| PyProbabilities { inner })
        .map_err(value_err)
}

/// `{"mean_dice": float, "classes": {name: dice}}`; the mean excludes background.
#[pyfunction]
#[pyo3(signature = (pred, truth, num_classes = 4))]
fn dice<'py>(py: Python<'py>, pred: Vec<u8>, truth: Vec<u8>, num_classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = DiceReport::compute(&pred, &truth, num_classes).map_err(value_err)?;
    let classes = PyDict::new(py);
    for c in &r.classes {
        classes.set_item(&c.name, c.dice)?;
    }
    let out = PyDict::new(py);
    out.set_item("mean_dice", r.mean_dice)?;
    out.set_item("classes", classes)?;
    Ok(out)
}

/// Generalized Dice Loss of flattened `n x c x h x w` probabilities against
/// a one-hot target of the same shape.
#[pyfunction]
fn gdl_loss(
    probs: Vec<f64>,
    target: Vec<f64>,
    weights: Vec<f64>,
    shape: (usize, usize, usize, usize),
) -> PyResult<f64> {
    let s = Shape::new(shape.0, shape.1, shape.2, shape.3);
    let p = Tensor::from_vec(s, probs).map_err(tensor_err)?;
    let t = Tensor::from_vec(s, target).map_err(tensor_err)?;
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(p);
    let l = tape.gdl_loss(v, &t, &GdlOptions::new(weights)).map_err(tensor_err)?;
    Ok(tape.value(l).data()[0])
}

/// Finite-difference check of one op: `(passed, max_rel_error, checked)`.
#[pyfunction]
#[pyo3(signature = (op, trials = 3, tolerance = 1e-4))]
fn grad_check(op: &str, trials: usize, tolerance: f64) -> PyResult<(bool, f64, usize)> {
    if !known_op(op) {
        return Err(PyValueError::new_err(format!("unknown op `{op}`")));
    }
    let cfg = GradCheckConfig {
        tolerance,
        ..GradCheckConfig::default()
    };
    let s = run_check(op, trials, &cfg).map_err(tensor_err)?;
    Ok((s.passed, s.max_rel_error, s.checked))
}

#[pymodule]
fn infinet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyProbabilities>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(gdl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("OPS", infinet::gradsuite::OP_NAMES.to_vec())?;
    Ok(())
}
