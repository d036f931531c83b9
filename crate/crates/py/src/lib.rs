//! Python module `pyv2pdet`: boxes, scenes, the detector, training and AP.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use v2pdet::config::{Config, ConfidenceMode, StreamSwitches};
use v2pdet::eval::{self, EvalDet};
use v2pdet::geom;
use v2pdet::model::{self, InferOptions};
use v2pdet::scene::{self, GroundTruth, PointCloud, SynthSpec};
use v2pdet::{checkpoint, train, voxel};

fn err(e: v2pdet::Error) -> PyErr {
    match e {
        v2pdet::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Oriented box: center, (l, w, h), yaw about +Z.
#[pyclass(name = "Box3D", module = "pyv2pdet", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyBox {
    pub inner: geom::Box3D,
}

#[pymethods]
impl PyBox {
    #[new]
    fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> PyResult<Self> {
        if size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(PyValueError::new_err(format!("box size must be positive, got {size:?}")));
        }
        Ok(PyBox { inner: geom::Box3D::new(center, size, yaw) })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.inner.size
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.inner.yaw
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        geom::corners(&self.inner).to_vec()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        geom::contains(&self.inner, p)
    }

    fn iou_3d(&self, other: &PyBox) -> f64 {
        geom::iou_3d(&self.inner, &other.inner)
    }

    fn iou_bev(&self, other: &PyBox) -> f64 {
        geom::iou_bev(&self.inner, &other.inner)
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!("Box3D(center={:?}, size={:?}, yaw={})", b.center, b.size, b.yaw)
    }

    fn __eq__(&self, other: &PyBox) -> bool {
        self.inner == other.inner
    }
}

fn boxes_in(v: &[PyBox]) -> Vec<geom::Box3D> {
    v.iter().map(|b| b.inner).collect()
}

fn boxes_out(v: &[geom::Box3D]) -> Vec<PyBox> {
    v.iter().map(|&inner| PyBox { inner }).collect()
}

/// Full detector configuration; round-trips through TOML.
#[pyclass(name = "Config", module = "pyv2pdet", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: Config,
}

#[pymethods]
impl PyConfig {
    /// KITTI-scale defaults.
    #[new]
    fn new() -> Self {
        PyConfig { inner: Config::default() }
    }

    /// Small scene and grid that train in minutes on one core.
    #[staticmethod]
    fn desk() -> Self {
        PyConfig { inner: model::desk_config() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: Config::from_toml(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: Config::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names()
    }

    #[getter]
    fn train_steps(&self) -> usize {
        self.inner.train.steps
    }

    #[setter]
    fn set_train_steps(&mut self, steps: usize) {
        self.inner.train.steps = steps;
    }
}

/// Scene as (points, boxes, class ids); points are rows of (x, y, z, r).
type PyScene = (Vec<[f64; 4]>, Vec<PyBox>, Vec<usize>);

fn scene_out(pc: PointCloud, gt: GroundTruth) -> PyScene {
    (pc.points, boxes_out(&gt.boxes), gt.class_ids)
}

fn scene_in(s: &PyScene) -> PyResult<(PointCloud, GroundTruth)> {
    let gt = GroundTruth { boxes: boxes_in(&s.1), class_ids: s.2.clone() };
    gt.validate().map_err(err)?;
    Ok((PointCloud::new(s.0.clone()), gt))
}

/// Random scene. `spec_toml` overrides the default synthetic spec; `seed`
/// always wins over the spec's own seed.
#[pyfunction]
#[pyo3(signature = (seed, spec_toml=None))]
fn synth_scene(seed: u64, spec_toml: Option<&str>) -> PyResult<PyScene> {
    let mut spec = match spec_toml {
        Some(t) => toml::from_str::<SynthSpec>(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthSpec::default(),
    };
    spec.seed = seed;
    let (pc, gt) = scene::synth_scene(&spec).map_err(err)?;
    Ok(scene_out(pc, gt))
}

#[pyfunction]
fn read_bin(path: PathBuf) -> PyResult<Vec<[f64; 4]>> {
    Ok(scene::load_kitti_bin(&path).map_err(err)?.points)
}

#[pyfunction]
fn write_bin(path: PathBuf, points: Vec<[f64; 4]>) -> PyResult<()> {
    scene::write_kitti_bin(&path, &PointCloud::new(points)).map_err(err)
}

/// Occupied voxels under `config`'s grid: (indices, mean features).
#[pyfunction]
fn voxelize(points: Vec<[f64; 4]>, config: &PyConfig) -> PyResult<(Vec<[i32; 3]>, Vec<Vec<f64>>)> {
    let spec = config.inner.grid().map_err(err)?;
    let pc = scene::crop_to_bounds(&PointCloud::new(points), &spec.bounds);
    let t = voxel::voxelize(&pc, &spec).map_err(err)?;
    let rows = (0..t.indices.len()).map(|i| t.features.row(i).to_vec()).collect();
    Ok((t.indices, rows))
}

#[pyfunction]
fn iou_3d(a: &PyBox, b: &PyBox) -> f64 {
    geom::iou_3d(&a.inner, &b.inner)
}

#[pyfunction]
fn iou_bev(a: &PyBox, b: &PyBox) -> f64 {
    geom::iou_bev(&a.inner, &b.inner)
}

#[pyclass(name = "Detector", module = "pyv2pdet")]
pub struct PyDetector {
    inner: model::Detector,
}

#[pymethods]
impl PyDetector {
    #[new]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyDetector { inner: model::Detector::new(&config.inner, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, store) = checkpoint::load(&path).map_err(err)?;
        Ok(PyDetector { inner: model::Detector::with_params(&cfg, &store).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner.cfg, &self.inner.store).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.cfg.clone() }
    }

    /// Detections as dicts. `confidence` is one of cls, unaligned-iou,
    /// aligned-iou, aligned-iou-x-cls; `refine=False` reports RPN proposals.
    #[pyo3(signature = (points, confidence="aligned-iou-x-cls", refine=true))]
    fn infer<'py>(&self, py: Python<'py>, points: Vec<[f64; 4]>, confidence: &str, refine: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let confidence: ConfidenceMode = confidence.parse().map_err(err)?;
        let opts = InferOptions { confidence, refine, streams: StreamSwitches::default() };
        let out = py.detach(|| self.inner.infer(&PointCloud::new(points), opts)).map_err(err)?;
        let names = self.inner.cfg.class_names();
        out.detections
            .iter()
            .map(|d| {
                let m = PyDict::new(py);
                m.set_item("box", PyBox { inner: d.bbox })?;
                m.set_item("class_id", d.class_id)?;
                m.set_item("class_name", names.get(d.class_id).cloned().unwrap_or_default())?;
                m.set_item("confidence", d.confidence)?;
                m.set_item("cls_prob", d.cls_prob)?;
                m.set_item("iou_unaligned", d.iou_unaligned)?;
                m.set_item("iou_aligned", d.iou_aligned)?;
                m.set_item("proposal", PyBox { inner: d.proposal })?;
                m.set_item("proposal_score", d.proposal_score)?;
                Ok(m)
            })
            .collect()
    }
}

/// Trains from scratch on `scenes`; returns the detector and per-step losses.
#[pyfunction]
fn train_detector<'py>(py: Python<'py>, config: &PyConfig, scenes: Vec<PyScene>) -> PyResult<(PyDetector, Vec<Bound<'py, PyDict>>)> {
    let scenes = scenes.iter().map(scene_in).collect::<PyResult<Vec<_>>>()?;
    let cfg = config.inner.clone();
    let out = py.detach(|| train::train(&cfg, &scenes, |_| {})).map_err(err)?;
    let losses = out
        .reports
        .iter()
        .map(|r| {
            let m = PyDict::new(py);
            for (k, v) in [("rpn", r.rpn), ("seg", r.seg), ("cls", r.cls), ("reg", r.reg), ("iou", r.iou), ("refine", r.refine), ("total", r.total)] {
                m.set_item(k, v)?;
            }
            m.set_item("step", r.step)?;
            Ok(m)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyDetector { inner: out.detector }, losses))
}

/// AP for one class. `dets` holds (frame, box, score); `gts[f]` the
/// ground-truth boxes of frame f.
#[pyfunction]
#[pyo3(signature = (dets, gts, iou_thresh, recall_positions=40, bev=false))]
fn average_precision(dets: Vec<(usize, PyBox, f64)>, gts: Vec<Vec<PyBox>>, iou_thresh: f64, recall_positions: usize, bev: bool) -> PyResult<f64> {
    if let Some(d) = dets.iter().find(|d| d.0 >= gts.len()) {
        return Err(PyValueError::new_err(format!("detection frame {} out of range for {} frames", d.0, gts.len())));
    }
    if recall_positions == 0 {
        return Err(PyValueError::new_err("recall_positions must be positive"));
    }
    let dets: Vec<EvalDet> = dets.into_iter().map(|(frame, b, score)| EvalDet { frame, bbox: b.inner, score }).collect();
    let gts: Vec<Vec<geom::Box3D>> = gts.iter().map(|g| boxes_in(g)).collect();
    let f = if bev { geom::iou_bev } else { geom::iou_3d };
    Ok(eval::average_precision(&dets, &gts, iou_thresh, recall_positions, f))
}

#[pymodule]
pub fn pyv2pdet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(read_bin, m)?)?;
    m.add_function(wrap_pyfunction!(write_bin, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize, m)?)?;
    m.add_function(wrap_pyfunction!(iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(iou_bev, m)?)?;
    m.add_function(wrap_pyfunction!(train_detector, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    Ok(())
}
