use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use shapereg::geometry::SimilarityTransform;
use shapereg::grid::Grid;
use shapereg::heatmap::{self, Heatmap, LatentOffsets};
use shapereg::pipeline::{self, Ablation, BenchmarkSizes, TrainConfig};
use shapereg::regulation::{self, Branch, DEFAULT_Z_MM};
use shapereg::shape_model::{self, ShapeCoefficients, DEFAULT_VARIANCE_TARGET};
use shapereg::synth::{self, GeneratorSpec};

fn py_err(e: shapereg::Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn grid_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Grid> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("ragged 2-D array"));
    }
    Grid::new(height, width, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn grid_to_rows(grid: &Grid) -> Vec<Vec<f64>> {
    grid.data().chunks_exact(grid.width()).map(<[f64]>::to_vec).collect()
}

fn heatmaps_from(maps: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Heatmap>> {
    maps.into_iter().map(|m| Heatmap::from_positive(grid_from_rows(m)?).map_err(py_err)).collect()
}

/// Ordered landmarks in normalised image coordinates plus a validity mask.
#[pyclass(name = "LandmarkSet", module = "shapereg_py", from_py_object)]
#[derive(Clone)]
struct PyLandmarkSet(shapereg::geometry::LandmarkSet);

#[pymethods]
impl PyLandmarkSet {
    #[new]
    #[pyo3(signature = (coords, spacing_mm, valid = None))]
    fn new(coords: Vec<[f64; 2]>, spacing_mm: f64, valid: Option<Vec<bool>>) -> PyResult<Self> {
        let valid = valid.unwrap_or_else(|| vec![true; coords.len()]);
        shapereg::geometry::LandmarkSet::with_mask(coords, valid, spacing_mm).map(Self).map_err(py_err)
    }

    #[getter]
    fn coords(&self) -> Vec<[f64; 2]> {
        self.0.coords().to_vec()
    }

    #[getter]
    fn valid(&self) -> Vec<bool> {
        self.0.valid().to_vec()
    }

    #[getter]
    fn spacing_mm(&self) -> f64 {
        self.0.spacing_mm()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("LandmarkSet(n={}, spacing_mm={})", self.0.len(), self.0.spacing_mm())
    }
}

/// PCA shape prior learned from labeled landmark sets.
#[pyclass(name = "ShapeModel", module = "shapereg_py", from_py_object)]
#[derive(Clone)]
struct PyShapeModel(shape_model::ShapeModel);

#[pymethods]
impl PyShapeModel {
    #[staticmethod]
    #[pyo3(signature = (labeled, variance_target = DEFAULT_VARIANCE_TARGET))]
    fn build(labeled: Vec<PyLandmarkSet>, variance_target: f64) -> PyResult<Self> {
        let sets: Vec<_> = labeled.into_iter().map(|s| s.0).collect();
        shape_model::build_shape_model(&sets, variance_target).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        shape_model::ShapeModel::from_json(text).map(Self).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    #[getter]
    fn n_components(&self) -> usize {
        self.0.n_components()
    }

    #[getter]
    fn sigmas(&self) -> Vec<f64> {
        self.0.sigmas().to_vec()
    }

    #[getter]
    fn mean(&self) -> Vec<[f64; 2]> {
        self.0.mean().points().collect()
    }

    /// Coefficients of `coords` and the pose `(scale, rotation, (tx, ty))` that
    /// brought them into the model frame.
    fn project(&self, coords: Vec<[f64; 2]>) -> PyResult<(Vec<f64>, (f64, f64, [f64; 2]))> {
        let c = self.0.project(&shapereg::geometry::ShapeVector::from_points(&coords)).map_err(py_err)?;
        Ok((c.values, (c.transform.scale, c.transform.rotation, c.transform.translation)))
    }

    #[pyo3(signature = (coefficients, pose = (1.0, 0.0, [0.0, 0.0])))]
    fn reconstruct(&self, coefficients: Vec<f64>, pose: (f64, f64, [f64; 2])) -> PyResult<Vec<[f64; 2]>> {
        let transform = SimilarityTransform::new(pose.0, pose.1, pose.2).map_err(py_err)?;
        let shape = self.0.reconstruct(&ShapeCoefficients { values: coefficients, transform }).map_err(py_err)?;
        Ok(shape.points().collect())
    }

    /// Clamps each coefficient to ±3σ of its mode.
    fn clamp(&self, coefficients: Vec<f64>) -> PyResult<Vec<f64>> {
        let c = ShapeCoefficients { values: coefficients, transform: SimilarityTransform::identity() };
        regulation::clamp_coefficients(&self.0, &c).map(|c| c.values).map_err(py_err)
    }
}

/// Outcome of regulating one prediction.
#[pyclass(name = "PseudoLabel", module = "shapereg_py", get_all)]
struct PyPseudoLabel {
    coords: Vec<[f64; 2]>,
    valid: Vec<bool>,
    /// `"adjusted"` or `"raw-with-exclusions"`.
    branch: String,
    deviations_mm: Vec<f64>,
    max_deviation_mm: f64,
}

#[pyfunction]
#[pyo3(signature = (model, prediction, z_mm = DEFAULT_Z_MM))]
fn regulate(model: &PyShapeModel, prediction: &PyLandmarkSet, z_mm: f64) -> PyResult<PyPseudoLabel> {
    let label = regulation::regulate(&model.0, &prediction.0, z_mm).map_err(py_err)?;
    Ok(PyPseudoLabel {
        branch: match label.branch {
            Branch::Adjusted => "adjusted".into(),
            Branch::RawWithExclusions => "raw-with-exclusions".into(),
        },
        coords: label.coords,
        valid: label.valid,
        deviations_mm: label.deviations_mm,
        max_deviation_mm: label.max_deviation_mm,
    })
}

/// Integral (soft-argmax) decoding of a positive 2-D heatmap to `(x, y)`.
#[pyfunction]
fn decode(heatmap: Vec<Vec<f64>>) -> PyResult<[f64; 2]> {
    let h = Heatmap::from_positive(grid_from_rows(heatmap)?).map_err(py_err)?;
    Ok(heatmap::decode(&h))
}

/// Region Attention loss and its gradient with respect to every heatmap value.
#[pyfunction]
fn region_attention_loss(
    heatmaps: Vec<Vec<Vec<f64>>>,
    targets: Vec<[f64; 2]>,
    valid: Vec<bool>,
    offsets: Vec<f64>,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let maps = heatmaps_from(heatmaps)?;
    let lg = heatmap::region_attention_loss(&maps, &targets, &valid, &LatentOffsets { magnitudes: offsets })
        .map_err(py_err)?;
    Ok((lg.loss, lg.grad))
}

#[pyfunction]
fn l1_coordinate_loss(heatmaps: Vec<Vec<Vec<f64>>>, targets: Vec<[f64; 2]>, valid: Vec<bool>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let maps = heatmaps_from(heatmaps)?;
    let lg = heatmap::l1_coordinate_loss(&maps, &targets, &valid).map_err(py_err)?;
    Ok((lg.loss, lg.grad))
}

/// Synthetic `(image rows, landmarks)` pairs from the default generator.
#[pyfunction]
#[pyo3(signature = (seed, count, start = 0))]
fn synthesize(seed: u64, count: usize, start: u64) -> PyResult<Vec<(Vec<Vec<f64>>, PyLandmarkSet)>> {
    let spec = GeneratorSpec::default_with_seed(seed);
    let samples = synth::generate_range(&spec, start, count).map_err(py_err)?;
    Ok(samples.into_iter().map(|s| (grid_to_rows(&s.image), PyLandmarkSet(s.landmarks))).collect())
}

/// Evaluation summary: MRE and SD in mm plus outlier percentages per radius.
#[pyclass(name = "Metrics", module = "shapereg_py", get_all)]
struct PyMetrics {
    mre_mm: f64,
    sd_mm: f64,
    n_predictions: usize,
    /// `(radius_mm, count, percent)`.
    outliers: Vec<(f64, usize, f64)>,
}

impl From<pipeline::Metrics> for PyMetrics {
    fn from(m: pipeline::Metrics) -> Self {
        Self {
            mre_mm: m.mre_mm,
            sd_mm: m.sd_mm,
            n_predictions: m.n_predictions,
            outliers: m.outliers.iter().map(|o| (o.radius_mm, o.count, o.percent)).collect(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (predictions, truth, radii_mm = pipeline::DEFAULT_OUTLIER_RADII_MM.to_vec()))]
fn evaluate(predictions: Vec<Vec<[f64; 2]>>, truth: Vec<PyLandmarkSet>, radii_mm: Vec<f64>) -> PyResult<PyMetrics> {
    let truth: Vec<_> = truth.into_iter().map(|t| t.0).collect();
    pipeline::evaluate_predictions(&predictions, &truth, &radii_mm).map(PyMetrics::from).map_err(py_err)
}

/// One trained ablation arm scored on its synthetic test split.
#[pyclass(name = "ArmOutcome", module = "shapereg_py", get_all)]
struct PyArmOutcome {
    ablation: String,
    seed: u64,
    test: Py<PyMetrics>,
    best_held_out_mre_mm: Option<f64>,
    self_train_end_mre_mm: Option<f64>,
    pseudo_label_errors: Vec<(u32, f64)>,
}

/// Trains one arm (`"full"`, `"no-sr"`, `"no-ral"`, `"no-sr-no-ral"` or
/// `"supervised-only"`) on a fresh synthetic benchmark.
#[pyfunction]
#[pyo3(signature = (seed, ablation = "full", epochs = 50, hidden = 128, labeled = 20, unlabeled = 200, held_out = 50, test = 100))]
#[allow(clippy::too_many_arguments)]
fn run_arm(
    py: Python<'_>,
    seed: u64,
    ablation: &str,
    epochs: u32,
    hidden: usize,
    labeled: usize,
    unlabeled: usize,
    held_out: usize,
    test: usize,
) -> PyResult<PyArmOutcome> {
    let arm: Ablation = ablation.parse().map_err(py_err)?;
    let cfg = TrainConfig { epochs_per_stage: epochs, hidden, ..TrainConfig::desk(seed, arm) };
    let sizes = BenchmarkSizes { labeled, unlabeled, held_out, test };
    let (outcome, _, _) = py
        .detach(|| {
            let (data, test) = pipeline::synthetic_benchmark(&GeneratorSpec::default_with_seed(seed), sizes)?;
            pipeline::run_arm(&data, &test, &cfg)
        })
        .map_err(py_err)?;
    Ok(PyArmOutcome {
        ablation: outcome.ablation.name().into(),
        seed: outcome.seed,
        test: Py::new(py, PyMetrics::from(outcome.test))?,
        best_held_out_mre_mm: outcome.best_held_out_mre_mm,
        self_train_end_mre_mm: outcome.self_train_end_mre_mm,
        pseudo_label_errors: outcome.pseudo_label_errors,
    })
}

#[pymodule]
fn shapereg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLandmarkSet>()?;
    m.add_class::<PyShapeModel>()?;
    m.add_class::<PyPseudoLabel>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyArmOutcome>()?;
    m.add_function(wrap_pyfunction!(regulate, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(region_attention_loss, m)?)?;
    m.add_function(wrap_pyfunction!(l1_coordinate_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_arm, m)?)?;
    m.add("DEFAULT_Z_MM", DEFAULT_Z_MM)?;
    Ok(())
}
