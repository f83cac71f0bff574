//! Python bindings for the contourformer crate: geometry utilities, the
//! Hungarian matcher, the refinement weighting table, synthetic scene
//! generation, and checkpoint inference.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use contourformer::assignment::hungarian_match;
use contourformer::cfdr::weighting_values;
use contourformer::data::{generate_scene, prepare_targets, DatasetConfig, Scene};
use contourformer::geometry::{
    align_start, init_contour_from_box, partition_contour, polygon_iou_oracle, resample_polygon,
    BBox, Contour, Point,
};
use contourformer::model::load_checkpoint;
use contourformer::train::scene_tensor;

type PyPoints = Vec<(f64, f64)>;

fn to_points(pts: &[(f64, f64)]) -> Vec<Point> {
    pts.iter().map(|&(x, y)| Point::new(x, y)).collect()
}

fn from_contour(c: &Contour) -> PyPoints {
    c.points.iter().map(|p| (p.x, p.y)).collect()
}

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Resample a polygon to `n` points at uniform arc-length spacing,
/// clockwise, starting from the topmost vertex.
#[pyfunction]
fn resample(points: PyPoints, n: usize) -> PyResult<PyPoints> {
    let c = resample_polygon(&to_points(&points), n).map_err(err)?;
    Ok(from_contour(&c))
}

/// Rasterized IoU between two polygons in normalized coordinates.
#[pyfunction]
#[pyo3(signature = (a, b, grid = 512))]
fn polygon_iou(a: PyPoints, b: PyPoints, grid: usize) -> PyResult<f64> {
    if grid < 64 {
        return Err(PyValueError::new_err("grid must be at least 64"));
    }
    Ok(polygon_iou_oracle(&to_points(&a), &to_points(&b), grid))
}

/// Sample `n` points of the ellipse inscribed in box (cx, cy, w, h).
#[pyfunction]
fn ellipse_from_box(cx: f64, cy: f64, w: f64, h: f64, n: usize) -> PyResult<PyPoints> {
    let c = init_contour_from_box(&BBox::new(cx, cy, w, h), n).map_err(err)?;
    Ok(from_contour(&c))
}

/// Split a contour into `n_sub` consecutive arcs; returns (arcs, boxes)
/// where each box is (cx, cy, w, h).
#[pyfunction]
fn split_contour(
    points: PyPoints,
    n_sub: usize,
) -> PyResult<(Vec<PyPoints>, Vec<(f64, f64, f64, f64)>)> {
    let set = partition_contour(&Contour::new(to_points(&points)), n_sub).map_err(err)?;
    let arcs = set
        .arcs
        .iter()
        .map(|a| a.iter().map(|p| (p.x, p.y)).collect())
        .collect();
    let boxes = set.boxes.iter().map(|b| (b.cx, b.cy, b.w, b.h)).collect();
    Ok((arcs, boxes))
}

/// Cyclically rotate `target` to minimize summed L1 distance against
/// `prediction` (same length, orientation preserved).
#[pyfunction]
fn align_contour_start(target: PyPoints, prediction: PyPoints) -> PyResult<PyPoints> {
    if target.len() != prediction.len() {
        return Err(PyValueError::new_err("contours must have equal length"));
    }
    let aligned = align_start(
        &Contour::new(to_points(&target)),
        &Contour::new(to_points(&prediction)),
    );
    Ok(from_contour(&aligned))
}

/// Minimum-cost assignment for a `rows × cols` cost matrix with
/// `rows <= cols`; returns (pairs, total_cost).
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let m = hungarian_match(&cost).map_err(err)?;
    Ok((m.pairs, m.total_cost))
}

/// Bin-offset weighting values used by the distribution refinement head.
#[pyfunction]
#[pyo3(signature = (bins = 17, w_max = 0.5, curvature = 2.0))]
fn refinement_weights(bins: usize, w_max: f64, curvature: f64) -> PyResult<Vec<f64>> {
    weighting_values(bins, w_max, curvature).map_err(err)
}

/// A synthetic scene: RGB pixels plus ground-truth instance polygons.
#[pyclass(name = "Scene")]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Flat HWC RGB pixel values in [0, 1].
    #[getter]
    fn pixels(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    /// Ground truth as (class_id, polygon) pairs in normalized coordinates.
    fn instances(&self) -> Vec<(usize, PyPoints)> {
        self.inner
            .instances
            .iter()
            .map(|i| (i.class_id, i.polygon.iter().map(|p| (p.x, p.y)).collect()))
            .collect()
    }

    /// Training targets: polygons resampled to `nv` points, tiny ones
    /// dropped.
    fn targets(&self, nv: usize) -> Vec<(usize, PyPoints)> {
        prepare_targets(&self.inner, nv)
            .into_iter()
            .map(|t| (t.class_id, from_contour(&t.contour)))
            .collect()
    }
}

/// Generate one deterministic synthetic scene.
#[pyfunction]
#[pyo3(signature = (seed, image_size = 256, max_instances = 6))]
fn make_scene(seed: u64, image_size: usize, max_instances: usize) -> PyResult<PyScene> {
    if image_size % 32 != 0 {
        return Err(PyValueError::new_err("image_size must be divisible by 32"));
    }
    let cfg = DatasetConfig {
        image_size,
        max_instances,
        seed,
        ..DatasetConfig::default()
    };
    Ok(PyScene {
        inner: generate_scene(&cfg, seed),
    })
}

/// A trained model loaded from a checkpoint, ready for inference.
#[pyclass(name = "Model")]
struct PyModel {
    model: contourformer::model::Model,
    // Keeps the weights alive for the model's lifetime.
    _varmap: candle_nn::VarMap,
    nv: usize,
}

#[pymethods]
impl PyModel {
    /// Load from a checkpoint base path (without the `.safetensors`
    /// extension).
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        let (model, varmap, cfg) = load_checkpoint(
            std::path::Path::new(path),
            candle_core::DType::F32,
            &candle_core::Device::Cpu,
        )
        .map_err(err)?;
        Ok(PyModel {
            model,
            _varmap: varmap,
            nv: cfg.nv,
        })
    }

    #[getter]
    fn contour_points(&self) -> usize {
        self.nv
    }

    /// Run on flat HWC RGB pixels in [0, 1]; returns detections as
    /// (class_id, score, polygon) with score ≥ `threshold`.
    #[pyo3(signature = (pixels, width, height, threshold = 0.5))]
    fn infer(
        &self,
        pixels: Vec<f32>,
        width: usize,
        height: usize,
        threshold: f64,
    ) -> PyResult<Vec<(usize, f64, PyPoints)>> {
        if pixels.len() != width * height * 3 {
            return Err(PyValueError::new_err(format!(
                "expected {} pixel values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        let scene = Scene {
            image: pixels,
            width,
            height,
            instances: Vec::new(),
        };
        let input =
            scene_tensor(&scene, candle_core::DType::F32, &candle_core::Device::Cpu).map_err(err)?;
        let out = self.model.forward(&input, None).map_err(err)?;
        let mut dets: Vec<(usize, f64, PyPoints)> = out
            .predictions(0)
            .map_err(err)?
            .into_iter()
            .filter(|p| p.score >= threshold)
            .map(|p| (p.class_id, p.score, from_contour(&p.contour)))
            .collect();
        dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        Ok(dets)
    }
}

#[pymodule]
fn contourformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(polygon_iou, m)?)?;
    m.add_function(wrap_pyfunction!(ellipse_from_box, m)?)?;
    m.add_function(wrap_pyfunction!(split_contour, m)?)?;
    m.add_function(wrap_pyfunction!(align_contour_start, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(refinement_weights, m)?)?;
    m.add_function(wrap_pyfunction!(make_scene, m)?)?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
