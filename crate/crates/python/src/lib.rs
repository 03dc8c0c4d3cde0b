//! Python bindings. Matrices cross the boundary as lists of rows and
//! structured results as plain dicts and lists.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;
use serde_json::Value;

use kronid::export::FitReport;
use kronid::hyperopt::{ard_certificate, fit, EdgeMask, EstimatorConfig, ShapeGrid};
use kronid::kernel::{build_stable_spline, KernelShape, Variant};
use kronid::likelihood::NoiseModel;
use kronid::metrics::{self, DEFAULT_SEED};
use kronid::netgen::{self, InputSpec, SimOptions};
use kronid::regress::Dataset;
use kronid::{Dims, KronError};

fn py_err(e: KronError) -> PyErr {
    match e {
        KronError::Config(_)
        | KronError::InvalidArgument(_)
        | KronError::InvalidShape(_)
        | KronError::Dimension(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_bound_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let out = PyList::empty(py);
            for item in items {
                out.append(json_to_py(py, item)?)?;
            }
            Ok(out.into_any())
        }
        Value::Object(map) => {
            let out = PyDict::new(py);
            for (k, item) in map {
                out.set_item(k, json_to_py(py, item)?)?;
            }
            Ok(out.into_any())
        }
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> PyResult<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {bad} has {} entries, expected {cols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

fn dataset(y: Vec<Vec<f64>>, u: Option<Vec<Vec<f64>>>, p1: usize, p2: usize) -> PyResult<Dataset> {
    let u = u.unwrap_or_else(|| vec![Vec::new(); y.len()]);
    let m = u.first().map_or(0, Vec::len);
    let dims = Dims::new(p1, p2, m).map_err(py_err)?;
    let ym = matrix(&y, dims.outputs(), "y")?;
    let um = matrix(&u, m, "u")?;
    Dataset::new(ym, um, dims).map_err(py_err)
}

fn estimator_config(variant: &str, lags: usize, restarts: usize, seed: u64, shape_grid: &str) -> PyResult<EstimatorConfig> {
    let shape_grid = match shape_grid {
        "full" => ShapeGrid::Full,
        "coarse" => ShapeGrid::Coarse,
        other => return Err(PyValueError::new_err(format!("unknown shape grid {other:?}"))),
    };
    Ok(EstimatorConfig {
        variant: variant.parse::<Variant>().map_err(py_err)?,
        lags,
        restarts,
        seed,
        shape_grid,
        ..EstimatorConfig::default()
    })
}

/// Stable-spline kernel matrix of the given size.
#[pyfunction]
fn stable_spline(beta: f64, omega0: f64, size: usize) -> PyResult<Vec<Vec<f64>>> {
    let shape = KernelShape::new(beta, omega0).map_err(py_err)?;
    Ok(rows(build_stable_spline(shape, size).map_err(py_err)?.entries()))
}

/// Random network and simulated data: `{"y", "u", "truth"}`.
#[pyfunction]
#[pyo3(signature = (p1, p2, m=0, n=500, seed=DEFAULT_SEED, density=0.6, hierarchical=false, order=20,
                    pole_radius=0.95, noise_var=1.0, white_input=false, noiseless=false))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    p1: usize,
    p2: usize,
    m: usize,
    n: usize,
    seed: u64,
    density: f64,
    hierarchical: bool,
    order: usize,
    pole_radius: f64,
    noise_var: f64,
    white_input: bool,
    noiseless: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let dims = Dims::new(p1, p2, m).map_err(py_err)?;
    let support = netgen::random_support(dims, density, hierarchical, seed).map_err(py_err)?;
    let noise = NoiseModel::constant(dims.outputs(), noise_var).map_err(py_err)?;
    let gt = netgen::random_system(&support, order, pole_radius, noise, seed).map_err(py_err)?;
    let opts = SimOptions {
        input: if white_input { InputSpec::White } else { InputSpec::default() },
        noiseless,
        ..SimOptions::default()
    };
    let data = netgen::simulate(&gt, n, &opts, seed.wrapping_add(1)).map_err(py_err)?;

    let truth = PyDict::new(py);
    truth.set_item("support", to_py(py, &gt.support)?)?;
    truth.set_item("edges", to_py(py, &gt.support.edges())?)?;
    truth.set_item("g", gt.g.iter().map(rows).collect::<Vec<_>>())?;
    truth.set_item("f", gt.f.iter().map(rows).collect::<Vec<_>>())?;
    truth.set_item("scale", gt.scale)?;
    truth.set_item("seed", gt.seed)?;
    let out = PyDict::new(py);
    out.set_item("y", rows(data.y()))?;
    out.set_item("u", rows(data.u()))?;
    out.set_item("truth", truth)?;
    Ok(out)
}

/// Fits one estimator; the report dict gains `"g"` and `"f"` with the
/// impulse-response estimate, one matrix per lag.
#[pyfunction]
#[pyo3(signature = (y, p1, p2, u=None, variant="K", lags=50, restarts=3, seed=0, shape_grid="full"))]
#[allow(clippy::too_many_arguments)]
fn identify<'py>(
    py: Python<'py>,
    y: Vec<Vec<f64>>,
    p1: usize,
    p2: usize,
    u: Option<Vec<Vec<f64>>>,
    variant: &str,
    lags: usize,
    restarts: usize,
    seed: u64,
    shape_grid: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(y, u, p1, p2)?;
    let cfg = estimator_config(variant, lags, restarts, seed, shape_grid)?;
    let res = py.detach(|| fit(&data, &cfg)).map_err(py_err)?;
    let report = to_py(py, &FitReport::from(&res))?;
    let dict = report.cast::<PyDict>()?;
    dict.set_item("g", res.estimate.g.iter().map(rows).collect::<Vec<_>>())?;
    dict.set_item("f", res.estimate.f.iter().map(rows).collect::<Vec<_>>())?;
    Ok(report)
}

/// Zero-lock certificate of the scale hyperparameters.
#[pyfunction]
#[pyo3(signature = (y, p1, p2, u=None, lags=50))]
fn ard_check<'py>(
    py: Python<'py>,
    y: Vec<Vec<f64>>,
    p1: usize,
    p2: usize,
    u: Option<Vec<Vec<f64>>>,
    lags: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(y, u, p1, p2)?;
    let cfg = EstimatorConfig { lags, ..EstimatorConfig::default() };
    let rep = py.detach(|| ard_certificate(&data, &cfg)).map_err(py_err)?;
    let out = to_py(py, &rep)?;
    out.cast::<PyDict>()?.set_item("all_lockable", rep.all_lockable())?;
    Ok(out)
}

/// Impulse-response fit in percent over the first `horizon` lags
/// (matrices per lag; missing lags count as zero).
#[pyfunction]
fn fit_score(truth: Vec<Vec<Vec<f64>>>, est: Vec<Vec<Vec<f64>>>, horizon: usize) -> PyResult<f64> {
    let conv = |mats: &[Vec<Vec<f64>>], what: &str| -> PyResult<Vec<DMatrix<f64>>> {
        mats.iter()
            .map(|m| matrix(m, m.first().map_or(0, Vec::len), what))
            .collect()
    };
    metrics::fit_score(&conv(&truth, "truth")?, &conv(&est, "est")?, horizon).map_err(py_err)
}

/// Fraction of misspecified edges between two `{"g", "f"}` edge masks.
#[pyfunction]
fn edge_error(truth: Bound<'_, PyDict>, est: Bound<'_, PyDict>) -> PyResult<f64> {
    let mask = |d: &Bound<'_, PyDict>| -> PyResult<EdgeMask> {
        let get = |k: &str| -> PyResult<Vec<Vec<u8>>> {
            d.get_item(k)?
                .ok_or_else(|| PyValueError::new_err(format!("edge mask lacks {k:?}")))?
                .extract()
        };
        Ok(EdgeMask { g: get("g")?, f: get("f")? })
    };
    metrics::err(&mask(&truth)?, &mask(&est)?).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "kronid")]
fn kronid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(stable_spline, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    m.add_function(wrap_pyfunction!(ard_check, m)?)?;
    m.add_function(wrap_pyfunction!(fit_score, m)?)?;
    m.add_function(wrap_pyfunction!(edge_error, m)?)?;
    Ok(())
}
