//! Python bindings: boxes and point-set conversion, training targets,
//! verification losses, corner pooling, NMS, joint refinement and AP.
//!
//! Grids cross the boundary as nested lists (`[C][H][W]`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reppoints_core::geometry::{self, BoxXYXY, ConversionMode, Point2, PointSet};
use reppoints_core::inference::{CornerCandidate as CoreCandidate, Detection as CoreDetection, RefineConfig};
use reppoints_core::losses::{self, FocalParams};
use reppoints_core::pipeline::eval;
use reppoints_core::targets::{self, CornerKind, LevelSpec, TargetParams};
use reppoints_core::{GtObject, GtScene, Tensor};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn corner_kind(s: &str) -> PyResult<CornerKind> {
    match s {
        "top_left" | "tl" => Ok(CornerKind::TopLeft),
        "bottom_right" | "br" => Ok(CornerKind::BottomRight),
        other => Err(PyValueError::new_err(format!("unknown corner kind `{other}`"))),
    }
}

fn kind_name(k: CornerKind) -> &'static str {
    match k {
        CornerKind::TopLeft => "top_left",
        CornerKind::BottomRight => "bottom_right",
    }
}

fn to_tensor(grid: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let c = grid.len();
    let h = grid.first().map_or(0, Vec::len);
    let w = grid.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if grid.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("grid must be rectangular"));
    }
    Tensor::from_vec(&[c, h, w], grid.into_iter().flatten().flatten().collect()).map_err(value_err)
}

fn from_tensor(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    t.data().chunks(h * w).map(|p| p.chunks(w).map(<[f64]>::to_vec).collect()).collect()
}

#[pyclass(name = "Box", module = "reppoints", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyBox {
    inner: BoxXYXY,
}

#[pymethods]
impl PyBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            inner: BoxXYXY::new(x1, y1, x2, y2),
        }
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.inner.x1
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.inner.y1
    }
    #[getter]
    fn x2(&self) -> f64 {
        self.inner.x2
    }
    #[getter]
    fn y2(&self) -> f64 {
        self.inner.y2
    }
    #[getter]
    fn width(&self) -> f64 {
        self.inner.width()
    }
    #[getter]
    fn height(&self) -> f64 {
        self.inner.height()
    }
    #[getter]
    fn area(&self) -> f64 {
        self.inner.area()
    }

    /// `(cx, cy, w, h)`.
    fn to_cwh(&self) -> (f64, f64, f64, f64) {
        let c = self.inner.to_cwh();
        (c.cx, c.cy, c.w, c.h)
    }

    fn to_tuple(&self) -> (f64, f64, f64, f64) {
        (self.inner.x1, self.inner.y1, self.inner.x2, self.inner.y2)
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geometry::iou(&self.inner, &other.inner)
    }

    fn giou(&self, other: &PyBox) -> f64 {
        geometry::giou(&self.inner, &other.inner)
    }

    fn __eq__(&self, other: &PyBox) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("Box({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2)
    }
}

/// Converts `[(x, y), ...]` to a box. `mode` is one of `explicit_corners`,
/// `min_max`, `partial_min_max` (uses `k`) or `moment` (uses `multiplier`).
#[pyfunction]
#[pyo3(signature = (points, mode = "explicit_corners", k = 4, multiplier = 2.0))]
pub fn convert_points(points: Vec<(f64, f64)>, mode: &str, k: usize, multiplier: f64) -> PyResult<PyBox> {
    let mode = match mode {
        "explicit_corners" => ConversionMode::ExplicitCorners,
        "min_max" => ConversionMode::MinMax,
        "partial_min_max" => ConversionMode::PartialMinMax { k },
        "moment" => ConversionMode::Moment { multiplier },
        other => return Err(PyValueError::new_err(format!("unknown conversion mode `{other}`"))),
    };
    let ps = PointSet::new(points.into_iter().map(|(x, y)| Point2::new(x, y)).collect());
    let inner = geometry::convert(&ps, mode).map_err(value_err)?;
    Ok(PyBox { inner })
}

/// Sub-cell offset target `p/s - floor(p/s)` of a pixel position.
#[pyfunction]
pub fn offset_target(x: f64, y: f64, stride: usize) -> PyResult<(f64, f64)> {
    if stride == 0 {
        return Err(PyValueError::new_err("stride must be positive"));
    }
    Ok(targets::offset_target(Point2::new(x, y), stride))
}

#[pyfunction]
#[pyo3(signature = (width, height, stride, iou_floor = 0.3, sigma_floor = 0.1))]
pub fn gaussian_sigma(width: f64, height: f64, stride: usize, iou_floor: f64, sigma_floor: f64) -> f64 {
    targets::gaussian_sigma(width, height, stride, &TargetParams { iou_floor, sigma_floor })
}

/// Ground-truth boxes of one image.
#[pyclass(name = "Scene", module = "reppoints", from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: GtScene,
}

#[pymethods]
impl PyScene {
    /// `boxes` is a list of `(x1, y1, x2, y2, class_id)`.
    #[new]
    fn new(image_w: usize, image_h: usize, num_classes: usize, boxes: Vec<(f64, f64, f64, f64, usize)>) -> PyResult<Self> {
        let objects = boxes
            .into_iter()
            .map(|(x1, y1, x2, y2, class_id)| GtObject {
                bbox: BoxXYXY::new(x1, y1, x2, y2),
                class_id,
            })
            .collect();
        let inner = GtScene::new(image_w, image_h, num_classes, objects).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.objects.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({}x{}, {} classes, {} objects)",
            self.inner.image_w,
            self.inner.image_h,
            self.inner.num_classes,
            self.inner.objects.len()
        )
    }
}

impl PyScene {
    fn level(&self, stride: usize) -> PyResult<LevelSpec> {
        if stride == 0 {
            return Err(PyValueError::new_err("stride must be positive"));
        }
        Ok(LevelSpec::for_image(stride, self.inner.image_w, self.inner.image_h))
    }
}

/// Corner heatmaps `[2][H][W]` and the positive cells as `(kind, row, col)`.
#[pyfunction]
#[pyo3(signature = (scene, stride, iou_floor = 0.3, sigma_floor = 0.1))]
pub fn corner_heatmaps(
    scene: &PyScene,
    stride: usize,
    iou_floor: f64,
    sigma_floor: f64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<(&'static str, usize, usize)>)> {
    let level = scene.level(stride)?;
    let (t, _) = targets::build_corner_target(&scene.inner, level, &TargetParams { iou_floor, sigma_floor });
    let mut positives = Vec::new();
    for kind in CornerKind::ALL {
        for row in 0..level.height {
            for col in 0..level.width {
                if t.is_positive(kind, row, col) {
                    positives.push((kind_name(kind), row, col));
                }
            }
        }
    }
    Ok((from_tensor(&t.heat), positives))
}

/// Within-box foreground labels and per-cell weights, both `[C][H][W]`.
#[pyfunction]
pub fn foreground_target(scene: &PyScene, stride: usize) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let t = targets::build_foreground_target(&scene.inner, scene.level(stride)?, scene.inner.num_classes);
    Ok((from_tensor(&t.labels), from_tensor(&t.weights)))
}

/// Size-normalized focal loss of foreground probabilities; returns `(value, gradient)`.
#[pyfunction]
#[pyo3(signature = (scene, stride, pred, alpha = 0.25, gamma = 2.0))]
pub fn foreground_loss(
    scene: &PyScene,
    stride: usize,
    pred: Vec<Vec<Vec<f64>>>,
    alpha: f64,
    gamma: f64,
) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let t = targets::build_foreground_target(&scene.inner, scene.level(stride)?, scene.inner.num_classes);
    let params = FocalParams {
        alpha_fg: alpha,
        gamma,
        ..Default::default()
    };
    let out = losses::normalized_focal_loss(&to_tensor(pred)?, &t, &params).map_err(value_err)?;
    Ok((out.value, from_tensor(&out.gradient)))
}

/// Penalty-reduced focal loss of corner probabilities `[2][H][W]`; returns `(value, gradient)`.
#[pyfunction]
#[pyo3(signature = (scene, stride, pred, alpha = 2.0, beta = 4.0))]
pub fn corner_heatmap_loss(
    scene: &PyScene,
    stride: usize,
    pred: Vec<Vec<Vec<f64>>>,
    alpha: f64,
    beta: f64,
) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let (t, _) = targets::build_corner_target(&scene.inner, scene.level(stride)?, &TargetParams::default());
    let params = FocalParams {
        alpha,
        beta,
        ..Default::default()
    };
    let out = losses::corner_heatmap_loss(&to_tensor(pred)?, &t, scene.inner.objects.len(), &params).map_err(value_err)?;
    Ok((out.value, from_tensor(&out.gradient)))
}

/// Directional max pooling of one `[H][W]` plane.
#[pyfunction]
pub fn corner_pool(grid: Vec<Vec<f64>>, kind: &str) -> PyResult<Vec<Vec<f64>>> {
    let kind = corner_kind(kind)?;
    let (out, _) = reppoints_core::kernels::corner_pool(&to_tensor(vec![grid])?, kind);
    Ok(from_tensor(&out).pop().unwrap_or_default())
}

#[pyclass(name = "Detection", module = "reppoints", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyDetection {
    inner: CoreDetection,
}

#[pymethods]
impl PyDetection {
    #[new]
    fn new(bbox: PyBox, class_id: usize, score: f64) -> Self {
        Self {
            inner: CoreDetection {
                bbox: bbox.inner,
                class_id,
                score,
                refined: [false; 2],
            },
        }
    }

    #[getter]
    fn bbox(&self) -> PyBox {
        PyBox { inner: self.inner.bbox }
    }
    #[getter]
    fn class_id(&self) -> usize {
        self.inner.class_id
    }
    #[getter]
    fn score(&self) -> f64 {
        self.inner.score
    }

    fn __repr__(&self) -> String {
        let b = self.inner.bbox;
        format!(
            "Detection(Box({}, {}, {}, {}), class_id={}, score={})",
            b.x1, b.y1, b.x2, b.y2, self.inner.class_id, self.inner.score
        )
    }
}

/// Class-wise greedy suppression, highest score first.
#[pyfunction]
pub fn nms(detections: Vec<PyDetection>, iou_threshold: f64) -> Vec<PyDetection> {
    let dets: Vec<CoreDetection> = detections.iter().map(|d| d.inner).collect();
    reppoints_core::nms(&dets, iou_threshold).into_iter().map(|inner| PyDetection { inner }).collect()
}

/// Snaps each corner of `bbox` to the best candidate within `radius` cells.
///
/// `candidates` holds `(kind, x, y, score, stride)`. Returns the refined box
/// and whether each corner moved.
#[pyfunction]
#[pyo3(signature = (bbox, candidates, radius = 1.0))]
pub fn joint_refine(bbox: PyBox, candidates: Vec<(String, f64, f64, f64, usize)>, radius: f64) -> PyResult<(PyBox, bool, bool)> {
    let cfg = RefineConfig {
        radius,
        ..Default::default()
    };
    cfg.validate().map_err(value_err)?;
    let mut tl = Vec::new();
    let mut br = Vec::new();
    for (kind, x, y, score, stride) in candidates {
        if stride == 0 {
            return Err(PyValueError::new_err("candidate stride must be positive"));
        }
        let c = CoreCandidate {
            kind: corner_kind(&kind)?,
            position: Point2::new(x, y),
            score,
            stride,
        };
        match c.kind {
            CornerKind::TopLeft => tl.push(c),
            CornerKind::BottomRight => br.push(c),
        }
    }
    let r = reppoints_core::joint_refine(&bbox.inner, &tl, &br, &cfg);
    let moved = r.corners.map(|c| c.candidate_score.is_some());
    Ok((PyBox { inner: r.bbox }, moved[0], moved[1]))
}

/// COCO-style AP of `detections[i]` against `scenes[i]`.
///
/// Returns a dict with `ap`, `ap_per_iou`, `iou_thresholds` and `per_class_ap`.
#[pyfunction]
#[pyo3(signature = (scenes, detections, iou_thresholds = None))]
pub fn evaluate<'py>(
    py: Python<'py>,
    scenes: Vec<PyScene>,
    detections: Vec<Vec<PyDetection>>,
    iou_thresholds: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let gts: Vec<GtScene> = scenes.into_iter().map(|s| s.inner).collect();
    let dets: Vec<Vec<CoreDetection>> = detections.into_iter().map(|v| v.into_iter().map(|d| d.inner).collect()).collect();
    let thresholds = iou_thresholds.unwrap_or_else(eval::coco_thresholds);
    let r = eval::evaluate_detections(&gts, &dets, &thresholds).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("ap", r.ap)?;
    out.set_item("ap_per_iou", r.ap_per_iou)?;
    out.set_item("iou_thresholds", r.iou_thresholds)?;
    out.set_item("per_class_ap", r.per_class_ap)?;
    Ok(out)
}

#[pymodule]
fn reppoints(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyDetection>()?;
    m.add_function(wrap_pyfunction!(convert_points, m)?)?;
    m.add_function(wrap_pyfunction!(offset_target, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(corner_heatmaps, m)?)?;
    m.add_function(wrap_pyfunction!(foreground_target, m)?)?;
    m.add_function(wrap_pyfunction!(foreground_loss, m)?)?;
    m.add_function(wrap_pyfunction!(corner_heatmap_loss, m)?)?;
    m.add_function(wrap_pyfunction!(corner_pool, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(joint_refine, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_and_offsets() {
        let b = convert_points(vec![(2.0, 3.0), (10.0, 7.0)], "explicit_corners", 4, 2.0).unwrap();
        assert_eq!(b.to_cwh(), (6.0, 5.0, 8.0, 4.0));
        assert!(convert_points(vec![(0.0, 0.0)], "nope", 4, 2.0).is_err());
        assert_eq!(offset_target(13.0, 7.0, 8).unwrap(), (0.625, 0.875));
    }

    #[test]
    fn grids_round_trip() {
        let g = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]];
        assert_eq!(from_tensor(&to_tensor(g.clone()).unwrap()), g);
        assert!(to_tensor(vec![vec![vec![1.0], vec![2.0, 3.0]]]).is_err());
    }

    #[test]
    fn pooling_matches_directional_max() {
        let out = corner_pool(vec![vec![1.0, 3.0], vec![2.0, 0.0]], "top_left").unwrap();
        assert_eq!(out, vec![vec![3.0 + 2.0, 3.0 + 3.0], vec![2.0 + 2.0, 0.0 + 0.0]]);
        assert!(corner_pool(vec![vec![0.0]], "middle").is_err());
    }

    #[test]
    fn refinement_snaps_within_radius() {
        let b = PyBox::new(0.0, 0.0, 10.0, 10.0);
        let cands = vec![("top_left".to_string(), 1.0, 1.0, 0.9, 4), ("br".to_string(), 30.0, 30.0, 0.9, 4)];
        let (r, tl, br) = joint_refine(b, cands, 1.0).unwrap();
        assert!(tl && !br);
        assert_eq!(r.to_tuple(), (1.0, 1.0, 10.0, 10.0));
    }
}
