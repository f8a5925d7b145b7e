//! Python bindings. Images cross the boundary as flat channel-major lists
//! (`3·H·W` floats in `[0,1]`), masks as flat row-major lists.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use evidex::classifier::{self, Architecture, ClassifierModel, TrainConfig};
use evidex::explainer::{self, BackgroundKind, ExplainerConfig, Preset};
use evidex::metrics::EvidenceReport;
use evidex::tensor::Tensor;
use evidex::{gradcam as gc, selftest as st, synth, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        Error::Numeric { .. } | Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn square_image(pixels: Vec<f64>) -> PyResult<Tensor> {
    let plane = pixels.len() / 3;
    let side = (plane as f64).sqrt().round() as usize;
    if side * side * 3 != pixels.len() {
        return Err(PyValueError::new_err(format!(
            "expected 3·S·S channel-major values, got {}",
            pixels.len()
        )));
    }
    Tensor::new(vec![1, 3, side, side], pixels).map_err(py_err)
}

/// One synthetic corpus image.
#[pyclass(module = "evidex", frozen, get_all)]
struct SynthImage {
    label: usize,
    size: usize,
    seed: u64,
    pixels: Vec<f64>,
    truth_mask: Vec<bool>,
}

#[pymethods]
impl SynthImage {
    fn __repr__(&self) -> String {
        format!("SynthImage(label={}, size={}, seed={})", self.label, self.size, self.seed)
    }
}

impl From<synth::SynthImage> for SynthImage {
    fn from(s: synth::SynthImage) -> Self {
        Self {
            label: s.label,
            size: s.size(),
            seed: s.seed,
            pixels: s.pixels.into_data(),
            truth_mask: s.truth_mask,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (label, size = 64, seed = 0))]
fn generate_image(label: usize, size: usize, seed: u64) -> PyResult<SynthImage> {
    synth::generate_image(label, size, seed).map(Into::into).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n_per_class, size = 64, seed = 42))]
fn generate_corpus(n_per_class: usize, size: usize, seed: u64) -> PyResult<Vec<SynthImage>> {
    let corpus = synth::generate_corpus(n_per_class, size, seed).map_err(py_err)?;
    Ok(corpus.into_iter().map(Into::into).collect())
}

/// A frozen classifier.
#[pyclass(module = "evidex", frozen)]
struct Classifier {
    inner: ClassifierModel,
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ClassifierModel::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Trains on a generated corpus; returns the model and held-out accuracy.
    #[staticmethod]
    #[pyo3(signature = (n_per_class = 250, size = 64, epochs = 20, seed = 42))]
    fn train(py: Python<'_>, n_per_class: usize, size: usize, epochs: usize, seed: u64) -> PyResult<(Self, f64)> {
        py.detach(|| {
            let corpus = synth::generate_corpus(n_per_class, size, seed)?;
            let (train, test) = synth::split(corpus);
            let arch = Architecture { input_size: size, ..Architecture::default() };
            let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
            let (inner, report) = classifier::train_classifier(arch, &train, &test, &cfg)?;
            Ok((Self { inner }, report.test_accuracy.unwrap_or(f64::NAN)))
        })
        .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.weight_digest()
    }

    /// `(class, probabilities)` for one image.
    fn predict(&self, pixels: Vec<f64>) -> PyResult<(usize, Vec<f64>)> {
        self.inner.predict(&square_image(pixels)?).map_err(py_err)
    }
}

#[pyclass(module = "evidex", frozen, get_all)]
struct Explanation {
    mask: Vec<f64>,
    binary_mask: Vec<bool>,
    masked: Vec<f64>,
    /// Total objective per step.
    losses: Vec<f64>,
    label: usize,
    conf_x: f64,
    conf_e: f64,
    decision_preserved: bool,
    area_fraction: f64,
    bin_fraction: f64,
    rob_pass_rate: f64,
    seconds: f64,
}

#[pymethods]
impl Explanation {
    fn __repr__(&self) -> String {
        format!(
            "Explanation(label={}, preserved={}, area={:.3}, conf {:.3} -> {:.3})",
            self.label, self.decision_preserved, self.area_fraction, self.conf_x, self.conf_e
        )
    }
}

fn report_fields(r: &EvidenceReport) -> (usize, f64, f64, bool, f64, f64, f64, f64) {
    (
        r.y,
        r.conf_x,
        r.conf_e,
        r.decision_preserved,
        r.area_fraction,
        r.bin_fraction,
        r.rob_pass_rate,
        r.wall_seconds,
    )
}

/// Fits a Med-CAM mask. Keyword `lambdas` override individual weights,
/// e.g. `{"area": 20.0}`.
#[pyfunction]
#[pyo3(signature = (model, pixels, preset = "default", steps = None, seed = 0, background = "uniform", lambdas = None))]
#[allow(clippy::too_many_arguments)]
fn explain(
    py: Python<'_>,
    model: &Classifier,
    pixels: Vec<f64>,
    preset: &str,
    steps: Option<usize>,
    seed: u64,
    background: &str,
    lambdas: Option<std::collections::HashMap<String, f64>>,
) -> PyResult<Explanation> {
    let image = square_image(pixels)?;
    let mut cfg = ExplainerConfig::preset(preset.parse::<Preset>().map_err(py_err)?);
    cfg.seed = seed;
    cfg.background = background.parse::<BackgroundKind>().map_err(py_err)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    for (name, v) in lambdas.unwrap_or_default() {
        let slot = match name.as_str() {
            "act" => &mut cfg.lambda_act,
            "ce" => &mut cfg.lambda_ce,
            "kl" => &mut cfg.lambda_kl,
            "area" => &mut cfg.lambda_area,
            "bin" => &mut cfg.lambda_bin,
            "tv" => &mut cfg.lambda_tv,
            "rob" => &mut cfg.lambda_rob,
            _ => return Err(PyValueError::new_err(format!("unknown loss term `{name}`"))),
        };
        *slot = v;
    }
    let ex = py
        .detach(|| explainer::explain(&image, &model.inner, &cfg, None))
        .map_err(py_err)?;
    let (label, conf_x, conf_e, decision_preserved, area_fraction, bin_fraction, rob_pass_rate, seconds) =
        report_fields(&ex.report);
    Ok(Explanation {
        binary_mask: ex.binary_mask().to_vec(),
        mask: ex.mask.values,
        masked: ex.masked.into_data(),
        losses: ex.trajectory.iter().map(|b| b.total).collect(),
        label,
        conf_x,
        conf_e,
        decision_preserved,
        area_fraction,
        bin_fraction,
        rob_pass_rate,
        seconds,
    })
}

/// Grad-CAM heatmap for the predicted class (or `target`); returns
/// `(values, degenerate)`.
#[pyfunction]
#[pyo3(signature = (model, pixels, target = None, layer = gc::DEFAULT_LAYER))]
fn gradcam(model: &Classifier, pixels: Vec<f64>, target: Option<usize>, layer: &str) -> PyResult<(Vec<f64>, bool)> {
    let image = square_image(pixels)?;
    let target = match target {
        Some(t) => t,
        None => model.inner.logits(&image).map_err(py_err)?.argmax(),
    };
    let h = gc::gradcam(&model.inner, &image, target, layer).map_err(py_err)?;
    Ok((h.values, h.degenerate))
}

#[pyfunction]
fn threshold_heatmap(values: Vec<f64>, width: usize, keep_fraction: f64) -> PyResult<Vec<bool>> {
    if width == 0 || values.len() % width != 0 {
        return Err(PyValueError::new_err("values do not form rows of the given width"));
    }
    let heat = gc::Heatmap {
        height: values.len() / width,
        width,
        values,
        source_layer: String::new(),
        degenerate: false,
    };
    gc::threshold_heatmap(&heat, keep_fraction).map_err(py_err)
}

/// Runs the engine self-test; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selftest(py: Python<'_>, seed: u64) -> (bool, String) {
    let report = py.detach(|| st::run(seed));
    (report.all_passed(), report.to_string())
}

#[pymodule(name = "evidex")]
fn evidex_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SynthImage>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Explanation>()?;
    m.add_function(wrap_pyfunction!(generate_image, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(gradcam, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("CLASS_NAMES", synth::CLASS_NAMES.to_vec())?;
    Ok(())
}
