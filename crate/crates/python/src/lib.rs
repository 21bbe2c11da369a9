//! Python bindings: waveguide simulation, covariance features, FEAST
//! selection, and the file-based experiment stages.

use std::path::PathBuf;

use feast_core::config::{Experiment, ExperimentConfig};
use feast_core::feast::{self, FeastOptions};
use feast_core::features::{self, RangeBinning};
use feast_core::network::{EpochRecord, EpochTrace};
use feast_core::pipeline::{self, ErrorClass, PipelineError, RunDir, TestEnv};
use feast_core::waveguide::{self, ArrayGeometry, BottomCondition, ModeSet, SoundSpeedProfile, WaveguideEnv};
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.class() {
        ErrorClass::Config => PyValueError::new_err(e.to_string()),
        ErrorClass::Numeric => PyRuntimeError::new_err(e.to_string()),
        ErrorClass::Io => PyIOError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Environment", module = "feast_py")]
struct PyEnvironment {
    inner: WaveguideEnv,
}

#[pymethods]
impl PyEnvironment {
    #[new]
    #[pyo3(signature = (depths, speeds, bottom = "rigid", density = 1000.0, seabed_speed = None))]
    fn new(depths: Vec<f64>, speeds: Vec<f64>, bottom: &str, density: f64, seabed_speed: Option<f64>) -> PyResult<Self> {
        let bottom = match bottom {
            "rigid" => BottomCondition::Rigid,
            "pressure_release" => BottomCondition::PressureRelease,
            other => return Err(value_err(format!("unknown bottom {other:?}"))),
        };
        let ssp = SoundSpeedProfile::new(depths, speeds).map_err(value_err)?;
        let inner = WaveguideEnv::new(ssp, bottom, density)
            .and_then(|e| e.with_seabed_speed(seabed_speed))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// The default training environment (mild thermocline).
    #[staticmethod]
    fn thermocline() -> PyResult<Self> {
        Ok(Self { inner: feast_core::config::thermocline_e1().to_env().map_err(value_err)? })
    }

    /// Copy with `offset` m/s added above `above_depth`.
    #[pyo3(signature = (above_depth, offset, ramp = 1.0))]
    fn perturbed(&self, above_depth: f64, offset: f64, ramp: f64) -> PyResult<Self> {
        let ssp = self.inner.ssp.with_offset_above(above_depth, offset, ramp).map_err(value_err)?;
        let inner = WaveguideEnv::new(ssp, self.inner.bottom, self.inner.density)
            .and_then(|e| e.with_seabed_speed(self.inner.seabed_speed))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn water_depth(&self) -> f64 {
        self.inner.water_depth()
    }

    fn speed_at(&self, depth: f64) -> f64 {
        self.inner.ssp.speed_at(depth)
    }

    fn solve_modes(&self, frequency: f64, grid_step: f64) -> PyResult<PyModeSet> {
        Ok(PyModeSet { inner: waveguide::solve_modes(&self.inner, frequency, grid_step).map_err(value_err)? })
    }

    fn __repr__(&self) -> String {
        format!("Environment(water_depth={}, bottom={:?})", self.inner.water_depth(), self.inner.bottom)
    }
}

#[pyclass(name = "ModeSet", module = "feast_py")]
struct PyModeSet {
    inner: ModeSet,
}

#[pymethods]
impl PyModeSet {
    #[getter]
    fn wavenumbers(&self) -> Vec<f64> {
        self.inner.wavenumbers.clone()
    }

    #[getter]
    fn num_modes(&self) -> usize {
        self.inner.num_modes()
    }

    #[getter]
    fn frequency(&self) -> f64 {
        self.inner.frequency
    }

    /// Mode amplitudes at `depth`, linearly interpolated.
    fn amplitudes_at(&self, depth: f64) -> Vec<f64> {
        self.inner.amplitudes_at(depth)
    }

    /// Complex field at each receiver for a source at (`range`, `source_depth`).
    fn pressure(&self, range: f64, source_depth: f64, array_depths: Vec<f64>) -> PyResult<Vec<Complex64>> {
        let array = ArrayGeometry::new(array_depths).map_err(value_err)?;
        Ok(waveguide::pressure_field(&self.inner, range, source_depth, &array).map_err(value_err)?.0)
    }
}

/// Real feature vector of the normalized covariance of `p`.
#[pyfunction]
fn covariance_feature(p: Vec<Complex64>) -> PyResult<Vec<f64>> {
    Ok(features::covariance_feature(&waveguide::PressureVector(p)).map_err(value_err)?.0)
}

#[pyclass(name = "RangeBinning", module = "feast_py")]
struct PyRangeBinning {
    inner: RangeBinning,
}

#[pymethods]
impl PyRangeBinning {
    #[new]
    fn new(r_min: f64, r_max: f64, n_bins: usize) -> PyResult<Self> {
        Ok(Self { inner: RangeBinning::new(r_min, r_max, n_bins).map_err(value_err)? })
    }

    fn encode(&self, range: f64) -> PyResult<usize> {
        Ok(features::encode_range(range, &self.inner).map_err(value_err)?.bin_index)
    }

    fn decode(&self, bin: usize) -> PyResult<f64> {
        features::decode_bin(bin, &self.inner).map_err(value_err)
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.width()
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.inner.n_bins()
    }
}

/// Least-squares line `g ≈ a·t + b`; returns `(a, b)`.
#[pyfunction]
fn fit_linear(times: Vec<f64>, values: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = feast::fit_linear(&times, &values).map_err(value_err)?;
    Ok((t.a, t.b))
}

/// Relative RMS ranging error.
#[pyfunction]
fn rmse(predicted: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    feast::rmse(&predicted, &truth).map_err(value_err)
}

/// FEAST over a recorded trace. `predictions[k]` holds the predicted ranges
/// after epoch `k + 1`. Returns `(selected_epoch, lambda, l_feast)`.
#[pyfunction]
#[pyo3(signature = (losses, predictions, times, order = 1))]
fn feast_select(
    losses: Vec<f64>,
    predictions: Vec<Vec<f64>>,
    times: Vec<f64>,
    order: usize,
) -> PyResult<(usize, f64, Vec<f64>)> {
    if losses.len() != predictions.len() {
        return Err(value_err("losses and predictions differ in length"));
    }
    let records = losses
        .into_iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (train_loss, predicted_ranges))| EpochRecord { epoch: i + 1, train_loss, predicted_ranges })
        .collect();
    let opts = FeastOptions { order, ..FeastOptions::default() };
    let ft = feast::feast_curve(&EpochTrace { records }, &times, &opts).map_err(value_err)?;
    Ok((ft.selected_epoch(), ft.lambda, ft.curve()))
}

/// A resolved experiment configuration driving the run-directory stages.
#[pyclass(name = "Experiment", module = "feast_py")]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    /// `preset` is "desk" or "paper"; `config` is a JSON file path.
    #[new]
    #[pyo3(signature = (config = None, preset = "desk"))]
    fn new(config: Option<PathBuf>, preset: &str) -> PyResult<Self> {
        let (cfg, base) = match config {
            Some(path) => {
                let base = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
                (ExperimentConfig::load(&path).map_err(value_err)?, base)
            }
            None => match preset {
                "desk" => (ExperimentConfig::desk(), PathBuf::from(".")),
                "paper" => (ExperimentConfig::paper(), PathBuf::from(".")),
                other => return Err(value_err(format!("unknown preset {other:?}"))),
            },
        };
        Ok(Self { inner: cfg.resolve(&base).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.config.to_json()
    }

    #[pyo3(signature = (out, which = "e2"))]
    fn gen<'py>(&self, py: Python<'py>, out: PathBuf, which: &str) -> PyResult<Bound<'py, PyDict>> {
        let which: TestEnv = which.parse().map_err(pipeline_err)?;
        let s = pipeline::gen(&self.inner, which, &RunDir::new(out)).map_err(pipeline_err)?;
        let d = PyDict::new(py);
        d.set_item("n_train", s.n_train)?;
        d.set_item("n_test", s.n_test)?;
        d.set_item("input_dim", s.input_dim)?;
        d.set_item("bins_covered", s.bins_covered)?;
        d.set_item("modes_e1", s.modes_e1)?;
        Ok(d)
    }

    #[pyo3(signature = (out, seed = None, epochs = None))]
    fn train(&self, out: PathBuf, seed: Option<u64>, epochs: Option<usize>) -> PyResult<(usize, f64)> {
        let cfg = pipeline::train_config(&self.inner, seed, epochs);
        let s = pipeline::train(&self.inner, &RunDir::new(out), &cfg, |_| {}).map_err(pipeline_err)?;
        Ok((s.epochs, s.final_loss))
    }

    /// Returns the selected epoch.
    fn select(&self, out: PathBuf) -> PyResult<usize> {
        let cfg = pipeline::train_config(&self.inner, None, None);
        let ft = pipeline::select(&self.inner, &RunDir::new(out), &cfg, false).map_err(pipeline_err)?;
        Ok(ft.selected_epoch())
    }

    #[pyo3(signature = (out, truth = None))]
    fn evaluate<'py>(&self, py: Python<'py>, out: PathBuf, truth: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
        let s = pipeline::eval(&RunDir::new(out), truth.as_deref()).map_err(pipeline_err)?;
        let d = PyDict::new(py);
        d.set_item("selected_epoch", s.selected_epoch)?;
        d.set_item("rmse_selected", s.rmse_selected)?;
        d.set_item("best_epoch", s.best_epoch)?;
        d.set_item("rmse_best", s.rmse_best)?;
        d.set_item("rmse_final", s.rmse_final)?;
        d.set_item("curve", s.curve.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// `(time, range, depth, peak)` per test sample.
    fn mfp(&self, out: PathBuf) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let rows = pipeline::mfp(&self.inner, &RunDir::new(out), None).map_err(pipeline_err)?;
        Ok(rows.iter().map(|r| (r.time, r.estimate.range, r.estimate.depth, r.estimate.peak)).collect())
    }

    #[pyo3(signature = (out, epochs = "10,selected,final"))]
    fn plotdata(&self, out: PathBuf, epochs: &str) -> PyResult<Vec<PathBuf>> {
        let specs = pipeline::parse_epoch_list(epochs).map_err(pipeline_err)?;
        pipeline::plotdata(&self.inner, &RunDir::new(out), &specs, None).map_err(pipeline_err)
    }
}

#[pymodule]
fn feast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyModeSet>()?;
    m.add_class::<PyRangeBinning>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(covariance_feature, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(feast_select, m)?)?;
    Ok(())
}
