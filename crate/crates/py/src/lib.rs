//! Python bindings: masks and RLE, box ops, evaluation, synthetic data,
//! training and inference.

use std::collections::HashMap;
use std::path::PathBuf;

use nucleo::config::RunConfig;
use nucleo::eval::{evaluate_dataset, EvalReport, ScoredMasks};
use nucleo::geometry::{iou_box, BoxXYXY};
use nucleo::maskops::{mask_iou, rle_decode, rle_encode, BinaryMask, SubmissionLine};
use nucleo::pipeline::commands::cmd_gradcheck;
use nucleo::pipeline::{train as run_training, TrainedModel};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(nucleo_py, NucleoError, PyException);

fn to_py(e: nucleo::Error) -> PyErr {
    NucleoError::new_err(e.to_string())
}

fn bbox(t: (f64, f64, f64, f64)) -> PyResult<BoxXYXY> {
    BoxXYXY::new(t.0, t.1, t.2, t.3).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Binary instance mask, row-major.
#[pyclass(name = "Mask", module = "nucleo_py", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    /// `bits` holds `height * width` bytes, nonzero meaning foreground.
    #[new]
    fn new(height: usize, width: usize, bits: Vec<u8>) -> PyResult<Self> {
        let bits = bits.into_iter().map(|b| (b != 0) as u8).collect();
        Ok(Self { inner: BinaryMask::new(height, width, bits).map_err(to_py)? })
    }

    #[staticmethod]
    fn rect(height: usize, width: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { inner: BinaryMask::rect(height, width, x1, y1, x2, y2) }
    }

    /// Decodes column-major, 1-indexed `start length` pairs.
    #[staticmethod]
    fn from_rle(encoded: &str, height: usize, width: usize) -> PyResult<Self> {
        let line = SubmissionLine::parse(&format!("_,{encoded}")).map_err(to_py)?;
        Ok(Self { inner: rle_decode(&line.to_rle(height, width)).map_err(to_py)? })
    }

    fn rle(&self) -> String {
        rle_encode(&self.inner).encoded_pixels()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        self.inner.bbox().map(|b| (b.x1, b.y1, b.x2, b.y2))
    }

    fn iou(&self, other: &PyMask) -> PyResult<f64> {
        mask_iou(&self.inner, &other.inner).map_err(to_py)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.bits().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, count={})", self.inner.height(), self.inner.width(), self.inner.count())
    }
}

#[pyfunction]
fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(iou_box(&bbox(a)?, &bbox(b)?))
}

/// Indices of the kept boxes, highest score first.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold = 0.5))]
fn nms(boxes: Vec<(f64, f64, f64, f64)>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    let boxes = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    nucleo::geometry::nms(&boxes, &scores, iou_threshold).map_err(to_py)
}

/// Decodes one RLE string into a mask, checking every run.
#[pyfunction]
fn rle_to_mask(encoded: &str, height: usize, width: usize) -> PyResult<PyMask> {
    PyMask::from_rle(encoded, height, width)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ap", r.ap)?;
    d.set_item("ap50", r.per_threshold_ap.map(|a| a[0]))?;
    d.set_item("per_threshold_ap", r.per_threshold_ap.map(|a| a.to_vec()))?;
    d.set_item("mean_mask_iou", r.mean_mask_iou)?;
    d.set_item("n_gt", r.n_gt)?;
    d.set_item("n_pred", r.n_pred)?;
    Ok(d)
}

/// Dataset-level AP@[0.5:0.95] and mean mask IoU.
///
/// `preds` maps image ids to `(Mask, score)` lists and `gts` maps the same
/// ids to mask lists.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    preds: HashMap<String, Vec<(PyMask, f64)>>,
    gts: HashMap<String, Vec<PyMask>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut ids: Vec<&String> = gts.keys().collect();
    ids.sort();
    let g: Vec<(String, Vec<BinaryMask>)> =
        ids.iter().map(|id| ((*id).clone(), gts[*id].iter().map(|m| m.inner.clone()).collect())).collect();
    let p: Vec<(String, ScoredMasks)> = preds
        .into_iter()
        .map(|(id, v)| (id, v.into_iter().map(|(m, s)| (m.inner, s)).collect()))
        .collect();
    let report = py.detach(|| evaluate_dataset(&p, &g)).map_err(to_py)?;
    report_dict(py, &report)
}

/// Writes `n` synthetic samples in the DSB layout; returns their ids.
#[pyfunction]
#[pyo3(signature = (n, out_dir, seed = 0))]
fn make_synth(py: Python<'_>, n: usize, out_dir: PathBuf, seed: u64) -> PyResult<Vec<String>> {
    py.detach(|| nucleo::data::make_synth(n, &out_dir, seed)).map_err(to_py)
}

/// Instance masks of one sample directory.
#[pyfunction]
fn load_masks(sample_dir: PathBuf) -> PyResult<Vec<PyMask>> {
    let s = nucleo::data::load_sample(&sample_dir).map_err(to_py)?;
    Ok(s.instances.into_iter().map(|inner| PyMask { inner }).collect())
}

/// Finite-difference check of every registered op as
/// `(op, max_rel_error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0, corrupt = None))]
fn gradcheck(py: Python<'_>, seed: u64, corrupt: Option<&str>) -> PyResult<Vec<(String, f64, bool)>> {
    let kind = match corrupt {
        Some(name) => Some(
            nucleo::autodiff::OpKind::from_name(name)
                .ok_or_else(|| PyValueError::new_err(format!("unknown op {name:?}")))?,
        ),
        None => None,
    };
    let rows = py.detach(|| cmd_gradcheck(seed, kind)).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.op, r.max_rel_error, r.pass)).collect())
}

/// Trains from `key = value` config text; returns the final checkpoint
/// path and the per-step total losses.
#[pyfunction]
fn train(py: Python<'_>, config: &str, out_dir: PathBuf) -> PyResult<(PathBuf, Vec<f64>)> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let o = py
        .detach(|| {
            std::fs::create_dir_all(&out_dir)?;
            run_training(&cfg, &out_dir)
        })
        .map_err(to_py)?;
    Ok((o.final_checkpoint, o.log.steps.iter().map(|s| s.loss.total).collect()))
}

#[pyclass(name = "Detection", module = "nucleo_py", frozen, get_all)]
struct PyDetection {
    bbox: (f64, f64, f64, f64),
    score: f64,
    mask: PyMask,
}

#[pymethods]
impl PyDetection {
    fn __repr__(&self) -> String {
        let b = self.bbox;
        format!("Detection(score={:.3}, bbox=({:.1}, {:.1}, {:.1}, {:.1}))", self.score, b.0, b.1, b.2, b.3)
    }
}

/// A trained checkpoint ready for inference.
#[pyclass(name = "Model", module = "nucleo_py", frozen)]
struct PyModel {
    inner: TrainedModel<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainedModel::load(&path).map_err(to_py)? })
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|p| p.value.len()).sum()
    }

    /// Detections for a sample directory, in the image's own resolution.
    fn predict(&self, py: Python<'_>, sample_dir: PathBuf) -> PyResult<Vec<PyDetection>> {
        let dets = py
            .detach(|| {
                let s = nucleo::data::load_sample(&sample_dir)?;
                self.inner.predict(&s, &self.inner.config.detect)
            })
            .map_err(to_py)?;
        Ok(dets
            .into_iter()
            .map(|d| PyDetection {
                bbox: (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2),
                score: d.score,
                mask: PyMask { inner: d.mask },
            })
            .collect())
    }
}

#[pymodule]
fn nucleo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NucleoError", m.py().get_type::<NucleoError>())?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(rle_to_mask, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(make_synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_masks, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
