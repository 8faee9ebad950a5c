//! Python bindings: experiment config, pipeline stages, and metrics.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use uniperc::balancing::min_norm::{
    min_norm_point as solve_min_norm, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use uniperc::data::{BoxAnnotation, ScoredBox};
use uniperc::metrics;
use uniperc::runner::{self, EvalOutcome, ExperimentConfig, Preset};
use uniperc::{Error, TaskKind, TaskSet};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Invalid(_) | Error::HashMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn mask(rows: Vec<Vec<u8>>) -> PyResult<Array2<u8>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn task(name: &str) -> PyResult<TaskKind> {
    name.parse::<TaskKind>().map_err(to_py)
}

/// Experiment configuration: a preset, optionally overlaid with a YAML file
/// and JSON overrides.
#[pyclass(name = "Config", module = "uniperc_py", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "desk", path = None, seed = None))]
    fn new(preset: &str, path: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(to_py)?;
        let inner = ExperimentConfig::load(path.as_deref(), Some(preset), seed).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    /// New config with `overrides` (a JSON object string) merged in.
    fn update(&self, overrides: &str) -> PyResult<Self> {
        let v: serde_json::Value =
            serde_json::from_str(overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyConfig {
            inner: self.inner.overlay(v).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(name={:?}, seed={}, out_dir={:?}, hash={})",
            self.inner.name,
            self.inner.seed,
            self.inner.out_dir,
            &self.inner.hash()[..12]
        )
    }
}

/// Generate training and evaluation data. Returns manifest hashes and the
/// contact-sheet path.
#[pyfunction]
#[pyo3(signature = (config, force = false))]
fn gen_data<'py>(py: Python<'py>, config: &PyConfig, force: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || runner::gen_data(&cfg, force))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("train_manifest_hash", out.train_manifest_hash)?;
    d.set_item("eval_manifest_hash", out.eval_manifest_hash)?;
    d.set_item("contact_sheet", out.contact_sheet)?;
    Ok(d)
}

/// Build one prompt bank per task; returns `{task: bank hash}`.
#[pyfunction]
fn build_prompts<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let banks = py
        .detach(move || runner::build_prompts(&cfg))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for b in banks {
        d.set_item(b.meta.task.name(), b.hash())?;
    }
    Ok(d)
}

/// Train single-task teachers (default: every task with unlabeled samples).
#[pyfunction]
#[pyo3(signature = (config, task = None))]
fn train_teachers<'py>(
    py: Python<'py>,
    config: &PyConfig,
    task: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let tasks = task.map(self::task).transpose()?.map(TaskSet::single);
    let reports = py
        .detach(move || runner::train_teachers(&cfg, tasks))
        .map_err(to_py)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("task", r.teacher.task.name())?;
            d.set_item("checkpoint", r.teacher.checkpoint)?;
            d.set_item("samples", r.accessed.len())?;
            d.set_item("start_loss", r.start_loss)?;
            d.set_item("end_loss", r.end_loss)?;
            d.set_item("val_metric", r.val_metric)?;
            Ok(d)
        })
        .collect()
}

/// Fill label gaps with teacher predictions; returns `{task: count}` plus
/// the number of pseudo boxes under `"boxes"`.
#[pyfunction]
fn pseudo_label<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let r = py
        .detach(move || runner::pseudo_label(&cfg))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for t in TaskKind::ALL {
        d.set_item(t.name(), r.written[t])?;
    }
    d.set_item("boxes", r.boxes)?;
    Ok(d)
}

/// Multi-task training. Returns the per-step total losses and checkpoint
/// paths.
#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn train<'py>(py: Python<'py>, config: &PyConfig, resume: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let s = py
        .detach(move || runner::train(&cfg, resume))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item(
        "steps",
        s.records.iter().map(|r| r.step).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "losses",
        s.records.iter().map(|r| r.total).collect::<Vec<_>>(),
    )?;
    d.set_item("checkpoints", s.checkpoints)?;
    d.set_item("final_step", s.final_step)?;
    Ok(d)
}

/// Evaluate a checkpoint (latest by default). Multi-task checkpoints give
/// the full metric row; teacher checkpoints give their task's score.
#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, allow_mismatch = false))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    checkpoint: Option<PathBuf>,
    allow_mismatch: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || runner::eval(&cfg, checkpoint.as_deref(), allow_mismatch))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    match out {
        EvalOutcome::Report(r) => {
            d.set_item("mAP", r.map)?;
            d.set_item("AP50", r.ap50)?;
            d.set_item("AP75", r.ap75)?;
            d.set_item("sem", r.miou_sem)?;
            d.set_item("driv", r.miou_driv)?;
            d.set_item("lane", r.iou_lane)?;
            d.set_item("avg", r.avg)?;
            d.set_item("delta_mtl", r.delta_mtl)?;
            d.set_item("config_hash", r.config_hash)?;
        }
        EvalOutcome::Teacher {
            task,
            score,
            logged,
        } => {
            d.set_item("task", task.name())?;
            d.set_item("score", score)?;
            d.set_item("logged", logged)?;
        }
    }
    Ok(d)
}

/// Recheck Avg and the multi-task delta of every bundled published row;
/// returns `(line, ok)` pairs.
#[pyfunction]
fn reproduce_tables() -> PyResult<Vec<(String, bool)>> {
    Ok(runner::reproduce_tables()
        .map_err(to_py)?
        .iter()
        .map(|c| (c.line(), c.ok()))
        .collect())
}

/// Mean IoU in percent of two label maps given as nested lists.
#[pyfunction]
fn miou(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>, k: usize) -> PyResult<f64> {
    metrics::compute_miou(mask(pred)?.view(), mask(gt)?.view(), k).map_err(to_py)
}

/// Foreground IoU in percent of two binary lane masks.
#[pyfunction]
fn lane_iou(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::compute_lane_iou(mask(pred)?.view(), mask(gt)?.view()).map_err(to_py)
}

/// `(mAP, AP50, AP75)` over images. Predictions are
/// `(category, x1, y1, x2, y2, score)` tuples, ground truth
/// `(category, x1, y1, x2, y2)`.
#[pyfunction]
fn mean_average_precision(
    predictions: Vec<Vec<(usize, f32, f32, f32, f32, f32)>>,
    ground_truth: Vec<Vec<(usize, f32, f32, f32, f32)>>,
) -> PyResult<(f64, f64, f64)> {
    if predictions.len() != ground_truth.len() {
        return Err(PyValueError::new_err(
            "predictions and ground truth cover different image counts",
        ));
    }
    let bx = |(category, x1, y1, x2, y2)| BoxAnnotation {
        category,
        x1,
        y1,
        x2,
        y2,
    };
    let preds: Vec<Vec<ScoredBox>> = predictions
        .into_iter()
        .map(|img| {
            img.into_iter()
                .map(|(c, x1, y1, x2, y2, score)| ScoredBox {
                    bbox: bx((c, x1, y1, x2, y2)),
                    score,
                })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<BoxAnnotation>> = ground_truth
        .into_iter()
        .map(|img| img.into_iter().map(bx).collect())
        .collect();
    let r = metrics::compute_map(&preds, &gts);
    Ok((r.map, r.ap50, r.ap75))
}

/// Mean relative per-task change against single-task baselines, in percent.
#[pyfunction]
fn delta_mtl(model: Vec<f64>, baseline: Vec<f64>) -> PyResult<f64> {
    metrics::delta_mtl(&model, &baseline).map_err(to_py)
}

#[pyfunction]
fn average_score(m: Vec<f64>) -> f64 {
    metrics::average_score(&m)
}

/// Simplex weights minimizing `‖Σ w_i g_i‖²`; returns `(weights, norm_sq)`.
#[pyfunction]
fn min_norm_point(grads: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let s = solve_min_norm(&grads, DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(to_py)?;
    Ok((s.weights, s.norm_sq))
}

/// Add every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(train_teachers, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_label, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce_tables, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(lane_iou, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(delta_mtl, m)?)?;
    m.add_function(wrap_pyfunction!(average_score, m)?)?;
    m.add_function(wrap_pyfunction!(min_norm_point, m)?)?;
    m.add("TASKS", TaskKind::ALL.map(|t| t.name()).to_vec())?;
    Ok(())
}

#[pymodule]
fn uniperc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
